"""Rectified-flow primitives: interpolation, flow-matching loss, Euler ODE
integration, Tweedie-style clean/noise predictions and pretraining.

Functions taking ``velocity`` accept any callable ``velocity(x, t, c)``; this
is either a :class:`~stepgrpo.diffnet.VelocityNet` or the on-tape ``apply``
handed out by :func:`~stepgrpo.diffnet.grad_params`, so the same arithmetic
serves evaluation and differentiation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffnet import OptState, VelocityNet, adamw_step, grad_params

log = logging.getLogger(__name__)


class PretrainDivergence(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"flow-matching loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class FlowState:
    x: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")


@dataclass(frozen=True)
class TimeGrid:
    """Descending grid ``1 = times[0] > ... > times[T] = 0``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("grid needs at least two times")
        if times[0] != 1.0 or times[-1] != 0.0 or np.any(np.diff(times) >= 0):
            raise ValueError("grid must decrease strictly from 1 to 0")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, steps):
        if steps < 1:
            raise ValueError("need at least one step")
        return cls(np.arange(steps, -1, -1, dtype=np.float64) / steps)

    @property
    def steps(self):
        return self.times.size - 1

    @property
    def dts(self):
        return self.times[:-1] - self.times[1:]


def interpolate(x0, x1, t):
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)


def predict_noise(x, t, v):
    """Noise endpoint implied by velocity ``v`` at ``(x, t)``."""
    return x + (1.0 - t) * v


def predict_clean(x, t, v):
    """Clean endpoint implied by velocity ``v`` at ``(x, t)``."""
    return x - t * v


def _ndim(x):
    # Var refuses np.ndim, so read the attribute when present
    return x.ndim if hasattr(x, "ndim") else np.ndim(x)


def _col(t, x):
    # per-row times need a trailing axis to broadcast against (B, d) points
    t = np.asarray(t, dtype=np.float64)
    return t[:, None] if t.ndim == 1 and _ndim(x) == 2 else t


def fm_loss(velocity, x0, x1, t, c):
    """Mean squared velocity error over a batch; works on and off the tape."""
    x0 = np.atleast_2d(x0)
    x1 = np.atleast_2d(x1)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    xt = interpolate(x0, x1, t[:, None])
    diff = (x1 - x0) - velocity(xt, t, c)
    return (diff * diff).sum(axis=1).mean()


def ode_step(velocity, x, t, dt, c):
    """Reverse-time Euler step from ``t`` to ``t - dt``."""
    if np.any(np.asarray(dt) > np.asarray(t) + 1e-15):
        raise ValueError(f"step dt={dt} overshoots t={t}")
    return x - velocity(x, t, c) * _col(dt, x)


def multistep_denoise(velocity, x, t, substeps, c):
    """Clean-sample estimate from ``x`` at time ``t`` via ``substeps`` Euler
    steps on the grid ``t, t(T'-1)/T', ..., t/T', 0``.

    ``t`` may be per-row; rows with ``t == 0`` come back unchanged.  With one
    substep this is exactly :func:`predict_clean`.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    dt = t / substeps
    for k in range(substeps, 0, -1):
        x = ode_step(velocity, x, t * (k / substeps), dt, c)
    return x


def ode_sample(velocity, x1, grid, c):
    """Deterministic sample: integrate ``x1`` from t=1 to 0 over ``grid``."""
    x = np.asarray(x1, dtype=np.float64)
    for t, dt in zip(grid.times[:-1], grid.dts):
        x = ode_step(velocity, x, t, dt, c)
    return x


@dataclass(frozen=True)
class ToyDistribution:
    """Isotropic Gaussian mixture; each context draws from a subset of modes."""

    means: np.ndarray
    std: float = 0.15
    weights: np.ndarray | None = None
    context_modes: tuple = field(default=((0, 1, 2, 3),))

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "means", means)
        w = np.ones(len(means)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(means),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative, one per mode")
        object.__setattr__(self, "weights", w / w.sum())
        cm = tuple(tuple(int(i) for i in s) for s in self.context_modes)
        for s in cm:
            if not s or any(i < 0 or i >= len(means) for i in s):
                raise ValueError(f"bad mode subset {s}")
        object.__setattr__(self, "context_modes", cm)
        if self.std <= 0:
            raise ValueError("std must be positive")

    @classmethod
    def four_modes(cls, std=0.15, context_modes=((0, 1, 2, 3),)):
        means = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]
        return cls(np.array(means), std, None, context_modes)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_contexts(self):
        return len(self.context_modes)

    def mode_probs(self, c):
        p = np.zeros(len(self.means))
        idx = list(self.context_modes[c])
        p[idx] = self.weights[idx]
        return p / p.sum()

    def sample(self, rng, n, c):
        """``n`` points for context ``c`` (int or length-``n`` array)."""
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        modes = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for ctx in np.unique(c):
            rows = c == ctx
            cdf = np.cumsum(self.mode_probs(ctx))
            modes[rows] = np.minimum(np.searchsorted(cdf, u[rows], side="right"), len(cdf) - 1)
        return self.means[modes] + self.std * rng.standard_normal((n, self.dim))

    def batch(self, rng, n):
        """Training tuple ``(x0, x1, t, c)`` with contexts drawn uniformly."""
        c = rng.integers(0, self.n_contexts, n)
        x0 = self.sample(rng, n, c)
        x1 = rng.standard_normal((n, self.dim))
        t = rng.random(n)
        return x0, x1, t, c

    def to_dict(self):
        return {
            "means": self.means.tolist(),
            "std": self.std,
            "weights": self.weights.tolist(),
            "context_modes": [list(s) for s in self.context_modes],
        }


@dataclass
class PretrainResult:
    net: VelocityNet
    losses: list
    heldout_loss: float


def pretrain(net, dist, iterations, rng, batch_size=256, opt=None, heldout_size=4096, log_every=0,
             final_lr_frac=1.0):
    """Fit ``net`` to ``dist`` by flow matching with AdamW.

    The learning rate follows a cosine from its initial value down to
    ``final_lr_frac`` times that value (1.0 keeps it constant).  Returns a
    :class:`PretrainResult` holding the trained net, the per-iteration training
    loss and the loss on a held-out batch drawn before training.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    heldout = dist.batch(rng, heldout_size)
    params = net.params
    opt = opt or OptState.zeros(len(params))
    base_lr = opt.lr
    losses = []
    for it in range(iterations):
        opt.lr = base_lr * (final_lr_frac + (1 - final_lr_frac) * 0.5 * (1 + np.cos(np.pi * it / iterations)))
        x0, x1, t, c = dist.batch(rng, batch_size)
        loss, grad = grad_params(net.config, params, lambda f: fm_loss(f, x0, x1, t, c))
        if not np.isfinite(loss):
            raise PretrainDivergence(it, loss)
        params, opt = adamw_step(params, grad, opt)
        losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("pretrain iter %d loss %.4f", it + 1, np.mean(losses[-log_every:]))
    trained = net.with_params(params)
    return PretrainResult(trained, losses, float(fm_loss(trained, *heldout)))
