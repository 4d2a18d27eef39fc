"""Toy reward functions and stepwise reward evaluation along trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowcore import multistep_denoise

KINDS = ("mode-proximity", "mixture-logdensity", "quadrant-indicator")


@dataclass(frozen=True)
class RewardSpec:
    """Reward ``R(x, c)``.

    ``targets[c]`` is a point for ``mode-proximity``, a sign pair such as
    ``(1, -1)`` for ``quadrant-indicator`` (a 0 entry accepts either sign), and
    a list of mode centres for ``mixture-logdensity`` (equal weights,
    isotropic std ``bandwidth``).
    """

    kind: str
    targets: tuple
    bandwidth: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if len(self.targets) == 0:
            raise ValueError("need one target per context")
        object.__setattr__(self, "targets", tuple(np.asarray(t, dtype=np.float64) for t in self.targets))

    @property
    def bounded(self):
        return self.kind != "mixture-logdensity"

    def to_dict(self):
        return {"kind": self.kind, "targets": [t.tolist() for t in self.targets],
                "bandwidth": self.bandwidth}


def reward(spec, x, c):
    """Reward of point(s) ``x`` under context ``c``."""
    if not 0 <= int(c) < len(spec.targets):
        raise KeyError(f"unknown context {c}")
    target = spec.targets[int(c)]
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "mode-proximity":
        return np.exp(-np.sum((x - target) ** 2, axis=-1) / spec.bandwidth ** 2)
    if spec.kind == "quadrant-indicator":
        ok = (target == 0) | (np.sign(x) == np.sign(target))
        return np.all(ok, axis=-1).astype(np.float64)
    centres = np.atleast_2d(target)
    d = x.shape[-1]
    sq = np.sum((x[..., None, :] - centres) ** 2, axis=-1)
    logk = -0.5 * sq / spec.bandwidth ** 2 - d * np.log(spec.bandwidth) - 0.5 * d * np.log(2 * np.pi)
    top = logk.max(axis=-1)
    return top + np.log(np.mean(np.exp(logk - top[..., None]), axis=-1))


def denoised_estimates(velocity, states, times, substeps, c):
    """Multi-substep clean estimate for every state; ``states`` is ``(..., T+1, d)``."""
    states = np.asarray(states, dtype=np.float64)
    flat = states.reshape(-1, states.shape[-1])
    t = np.broadcast_to(times, states.shape[:-1]).reshape(-1)
    return multistep_denoise(velocity, flat, t, substeps, c).reshape(states.shape)


def stepwise_rewards(velocity, traj, substeps, spec):
    """``r_t`` for each state of ``traj`` (order t=1 … 0); also stored on it.

    Every state is denoised independently, so the whole trajectory is one
    batched call.  The final state is at t=0 and is scored as is.
    """
    est = denoised_estimates(velocity, traj.states, traj.times, substeps, traj.c)
    r = reward(spec, est, traj.c)
    r[-1] = reward(spec, traj.states[-1], traj.c)
    traj.rewards = r
    return r


def group_stepwise_rewards(velocity, states, times, substeps, spec, c):
    """Batched version over ``(N, T+1, d)`` states; returns ``(N, T+1)``."""
    est = denoised_estimates(velocity, states, times, substeps, c)
    r = reward(spec, est, c)
    r[:, -1] = reward(spec, states[:, -1], c)
    return r
