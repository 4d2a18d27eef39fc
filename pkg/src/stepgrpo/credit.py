"""Turning stepwise rewards into per-transition advantages.

Column ``k`` of every ``N×T`` matrix here is the transition from grid state
``k`` to state ``k + 1``, i.e. ordered from t=1 toward t=0.  The gain of a
transition is the reward change it caused, ``r[k+1] - r[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_STD = 1e-8

METHODS = ("uniform", "stepwise-joint", "stepwise-perstep", "stepwise-ema", "stepwise-gae", "pdistill")


def gains(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError("rewards must be a rectangular N x (T+1) array")
    return r[:, 1:] - r[:, :-1]


def _standardize(g, axis):
    mean = g.mean(axis=axis, keepdims=True)
    std = g.std(axis=axis, keepdims=True)
    safe = np.where(std < DEGENERATE_STD, 1.0, std)
    return np.where(std < DEGENERATE_STD, 0.0, (g - mean) / safe)


def joint_normalize(g):
    """Standardise over all ``N·T`` entries at once."""
    g = np.asarray(g, dtype=np.float64)
    if g.size < 2:
        raise ValueError("need at least two gains")
    return _standardize(g, None)


def perstep_normalize(g):
    """Standardise each transition column across the group."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("need at least two trajectories")
    return _standardize(g, 0)


def uniform_advantage(final_rewards, steps):
    """Group-standardised final reward, repeated over all ``steps`` columns."""
    r = np.asarray(final_rewards, dtype=np.float64)
    return np.repeat(_standardize(r, None)[:, None], steps, axis=1)


@dataclass
class EmaState:
    b: np.ndarray
    alpha: float = 0.99
    initialized: bool = False

    @classmethod
    def zeros(cls, steps, alpha=0.99):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        return cls(np.zeros(steps), alpha)


def ema_center(g, state):
    """Subtract the current per-step baseline, then fold this batch into it."""
    g = np.asarray(g, dtype=np.float64)
    if state.b.shape != (g.shape[1],):
        raise ValueError("baseline length must equal the number of transitions")
    centered = g - state.b
    new_b = state.alpha * state.b + (1.0 - state.alpha) * g.mean(axis=0)
    return centered, EmaState(new_b, state.alpha, True)


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.95
    direction: str = "toward-final"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.direction not in ("toward-final", "paper-literal"):
            raise ValueError(f"unknown GAE direction {self.direction!r}")


def gae(g, cfg=GaeConfig()):
    """Discounted accumulation of gains.

    ``toward-final`` credits transition ``k`` with ``Σ_{j≥k} γ^{j-k} g_j``
    (later denoising steps).  ``paper-literal`` runs the same sum over the
    opposite column direction, i.e. toward t=1.
    """
    g = np.asarray(g, dtype=np.float64)
    if cfg.direction == "paper-literal":
        return gae(g[:, ::-1], GaeConfig(cfg.gamma))[:, ::-1]
    out = np.empty_like(g)
    acc = np.zeros(g.shape[0])
    for k in range(g.shape[1] - 1, -1, -1):
        acc = g[:, k] + cfg.gamma * acc
        out[:, k] = acc
    return out


@dataclass
class GainProfile:
    mean_abs: np.ndarray
    count: int


def gain_profile(groups):
    """Mean ``|g|`` per transition over every trajectory of every group."""
    rows = [tr.gains for grp in groups for tr in grp.trajectories]
    if not rows:
        raise ValueError("no trajectories")
    g = np.abs(np.stack(rows))
    return GainProfile(g.mean(axis=0), g.shape[0])


@dataclass
class CreditState:
    """Cross-iteration state some methods need (EMA baseline)."""

    ema: EmaState | None = None
    gae: GaeConfig = field(default_factory=GaeConfig)


def advantages(method, rewards, state=None):
    """Advantage matrix for ``method`` from ``N×(T+1)`` stepwise rewards.

    Returns ``(A, state)``; only ``stepwise-ema`` changes the state.
    """
    r = np.asarray(rewards, dtype=np.float64)
    steps = r.shape[1] - 1
    state = state or CreditState()
    if method == "uniform":
        return uniform_advantage(r[:, -1], steps), state
    g = gains(r)
    if method in ("stepwise-joint", "pdistill"):
        return joint_normalize(g), state
    if method == "stepwise-perstep":
        return perstep_normalize(g), state
    if method == "stepwise-ema":
        ema = state.ema or EmaState.zeros(steps)
        centered, ema = ema_center(g, ema)
        return joint_normalize(centered), CreditState(ema, state.gae)
    if method == "stepwise-gae":
        return joint_normalize(gae(g, state.gae)), state
    raise ValueError(f"unknown advantage method {method!r}")
