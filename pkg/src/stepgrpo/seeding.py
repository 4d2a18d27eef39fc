"""Deterministic random streams.

Every stream is a Philox counter-based generator keyed by
``SeedSequence(master_seed, spawn_key=keys)``, where string keys are mapped to
their CRC-32.  Two runs that ask for the same ``(master_seed, *keys)`` get the
same numbers regardless of what else they drew, so paired experiments can
share initial noise by construction.

Layout used by the training loop (``it`` = iteration index):

* ``(seed, "group", it)``        -> context id, then shared ``x_T``
* ``(seed, "traj", it, i)``      -> ``T×d`` transition noise for trajectory ``i``
* ``(seed, "init")``             -> network initialisation
* ``(seed, "pretrain")``         -> pretraining batches
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("stream keys must be nonnegative")
    return k


def stream(master_seed, *keys):
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
