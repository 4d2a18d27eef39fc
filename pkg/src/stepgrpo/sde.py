"""Stochastic samplers for rectified flows and their Gaussian transition law.

Two steppers are provided.  ``em`` is the Euler–Maruyama discretisation of the
marginal-preserving reverse SDE with drift ``v + σ²/(2t)·x̂1``; ``ddim``
recombines the clean/noise predictions with fresh noise so that the
interpolation variance is kept.  All transition helpers accept per-row ``t``
arrays and on-tape velocities, which is what the policy objective needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .flowcore import TimeGrid, _col, _ndim, ode_sample, predict_clean, predict_noise

_LOG_2PI = np.log(2.0 * np.pi)


class ScheduleInfeasible(ValueError):
    """ddim needs ``σ ≤ t - Δt`` for a real noise coefficient."""


@dataclass(frozen=True)
class NoiseSchedule:
    """σ_t family.

    ``kind='flowgrpo'``: ``a·sqrt(t/(1-t))``, with ``t`` clamped to
    ``1 - Δt/2`` so the first step has finite noise.
    ``kind='ddim'``: ``η·(t-Δt)·sqrt(1-t)`` by default; ``ddim_form`` selects
    the alternatives ``'linear'`` (``η·(t-Δt)``) or ``'t-sqrt'`` (``η·t·sqrt(1-t)``).
    ``kind='zero'``: no noise.
    """

    kind: str = "flowgrpo"
    a: float = 0.7
    eta: float = 0.9
    ddim_form: str = "main"

    def __post_init__(self):
        if self.kind not in ("flowgrpo", "ddim", "zero"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "flowgrpo" and not self.a > 0:
            raise ValueError("flowgrpo schedule needs a > 0")
        if self.kind == "ddim" and not 0.0 <= self.eta <= 1.0:
            raise ValueError("ddim schedule needs 0 <= eta <= 1")
        if self.ddim_form not in ("main", "linear", "t-sqrt"):
            raise ValueError(f"unknown ddim form {self.ddim_form!r}")


def sigma(schedule, t, dt):
    t = np.asarray(t, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if schedule.kind == "zero":
        return np.zeros(np.broadcast(t, dt).shape)[()]
    if schedule.kind == "flowgrpo":
        tc = np.minimum(t, 1.0 - dt / 2.0)
        return schedule.a * np.sqrt(tc / (1.0 - tc))
    one_minus = np.sqrt(np.maximum(1.0 - t, 0.0))
    if schedule.ddim_form == "linear":
        return schedule.eta * (t - dt)
    if schedule.ddim_form == "t-sqrt":
        return schedule.eta * t * one_minus
    return schedule.eta * (t - dt) * one_minus


@dataclass
class GaussianTransition:
    mean: object  # ndarray, or Var on the tape
    std: object

    def sample(self, eps):
        return self.mean + _col(self.std, eps) * eps


def em_transition(x, t, dt, v, sig, variant="matched"):
    """Euler–Maruyama transition ``t → t - Δt``.

    ``variant='matched'`` uses the reverse-time drift ``v + σ²/(2t)·x̂1``, which
    keeps the flow marginals.  ``variant='literal'`` flips the sign of the
    score correction (drift ``v - σ²/(2t)·x̂1``); it inflates the variance at
    every step and is kept only for comparison.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("em transition undefined at t = 0")
    if variant not in ("matched", "literal"):
        raise ValueError(f"unknown em variant {variant!r}")
    sign = 1.0 if variant == "matched" else -1.0
    sig = np.asarray(sig, dtype=np.float64)
    xhat1 = predict_noise(x, _col(t, x), v)
    drift = v + _col(sign * sig ** 2 / (2.0 * t), x) * xhat1
    mean = x - drift * _col(dt, x)
    return GaussianTransition(mean, sig * np.sqrt(dt))


def em_step(x, t, dt, v, sig, eps, variant="matched"):
    return em_transition(x, t, dt, v, sig, variant).sample(np.asarray(eps, dtype=np.float64))


def _ddim_coeff(t, dt, sig):
    s = np.asarray(t, dtype=np.float64) - dt
    sig = np.asarray(sig, dtype=np.float64)
    if np.any(s < -1e-15):
        raise ValueError("t - dt must be >= 0")
    if np.any(sig > s + 1e-12):
        bad = np.argmax(np.broadcast_to(sig - s, np.broadcast(sig, s).shape))
        tb, db, sb = (np.broadcast_to(a, np.broadcast(sig, s).shape).ravel()[bad]
                      for a in (np.asarray(t), np.asarray(dt), sig))
        raise ScheduleInfeasible(f"ddim schedule infeasible: t={tb}, dt={db}, sigma={sb} > t-dt")
    return s, np.sqrt(np.maximum(s * s - sig * sig, 0.0))


def ddim_transition(x0hat, x1hat, t, dt, sig):
    s, coeff = _ddim_coeff(t, dt, sig)
    mean = _col(1.0 - s, x0hat) * x0hat + _col(coeff, x1hat) * x1hat
    return GaussianTransition(mean, np.asarray(sig, dtype=np.float64))


def ddim_step(x0hat, x1hat, t, dt, sig, eps):
    return ddim_transition(x0hat, x1hat, t, dt, sig).sample(np.asarray(eps, dtype=np.float64))


def transition(stepper, x, t, dt, v, sig, em_variant="matched"):
    """Policy transition from state ``x`` at ``t`` given velocity ``v``."""
    if stepper == "em":
        return em_transition(x, t, dt, v, sig, em_variant)
    if stepper == "ddim":
        tc = _col(t, x)
        return ddim_transition(predict_clean(x, tc, v), predict_noise(x, tc, v), t, dt, sig)
    raise ValueError(f"unknown stepper {stepper!r}")


def coefficient_gap(t, dt, sig):
    """Noise-prediction coefficients ``(ddim, exact, taylor)`` for one step."""
    s = t - dt
    if sig > s:
        raise ScheduleInfeasible(f"sigma={sig} > t-dt={s}")
    return np.sqrt(s * s - sig * sig), s - sig ** 2 / (2.0 * t), s - sig ** 2 / (2.0 * s)


def gaussian_logprob(x, mean, std):
    """Isotropic Gaussian log-density, summed over the last axis."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("log-probability needs std > 0")
    diff = x - mean
    d = diff.shape[-1]
    return -0.5 * (diff * diff).sum(axis=-1) / std ** 2 - d * (0.5 * _LOG_2PI + np.log(std))


def gaussian_kl(mean1, std1, mean2, std2):
    """KL(N(mean1, std1²I) || N(mean2, std2²I)), summed over the last axis."""
    std1 = np.asarray(std1, dtype=np.float64)
    std2 = np.asarray(std2, dtype=np.float64)
    if np.any(std1 <= 0) or np.any(std2 <= 0):
        raise ValueError("KL needs positive stds")
    diff = mean1 - mean2
    d = mean1.shape[-1]
    r = (std1 / std2) ** 2
    # r - 1 - log r is exactly zero for equal stds, so identical laws give 0.0
    return 0.5 * ((diff * diff).sum(axis=-1) / std2 ** 2 + d * (r - 1.0 - np.log(r)))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One rollout.  Index ``j`` of ``states`` sits at ``times[j]``; transition
    ``k`` maps state ``k`` to state ``k + 1``."""

    c: int
    times: np.ndarray
    states: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    eps: np.ndarray
    logps: np.ndarray
    tweedie: np.ndarray
    rewards: np.ndarray | None = None
    gains: np.ndarray | None = None

    @property
    def steps(self):
        return len(self.times) - 1

    def replay_error(self):
        """Max deviation of stored states from ``mean + std·ε``."""
        rebuilt = self.means + self.stds[:, None] * self.eps
        return float(np.max(np.abs(rebuilt - self.states[1:])))


@dataclass
class Group:
    x_T: np.ndarray
    c: int
    trajectories: list = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def stack(self, name):
        return np.stack([getattr(tr, name) for tr in self.trajectories])


def rollout_batch(velocity, x_T, c, grid, stepper, schedule, eps, em_variant="matched"):
    """Roll out ``B`` trajectories in lock-step.

    ``x_T`` is ``(B, d)`` and ``eps`` is ``(B, T, d)``.  Returns a dict of
    stacked arrays (``states``, ``means``, ``stds``, ``logps``, ``tweedie``).
    """
    x = np.array(x_T, dtype=np.float64)
    b, d = x.shape
    n_steps = grid.steps
    states = np.empty((b, n_steps + 1, d))
    means = np.empty((b, n_steps, d))
    tweedie = np.empty((b, n_steps + 1, d))
    stds = np.empty(n_steps)
    logps = np.full((b, n_steps), np.nan)
    states[:, 0] = x
    for k, (t, dt) in enumerate(zip(grid.times[:-1], grid.dts)):
        v = velocity(x, t, c)
        sig = sigma(schedule, t, dt)
        tr = transition(stepper, x, t, dt, v, sig, em_variant)
        nxt = tr.mean + tr.std * eps[:, k]
        means[:, k] = tr.mean
        stds[k] = tr.std
        tweedie[:, k] = predict_clean(x, t, v)
        if tr.std > 0:
            logps[:, k] = gaussian_logprob(nxt, tr.mean, tr.std)
        x = nxt
        states[:, k + 1] = x
    tweedie[:, -1] = x
    return {"states": states, "means": means, "stds": stds, "logps": logps, "tweedie": tweedie}


def rollout(velocity, x_T, c, grid, stepper, schedule, rng, em_variant="matched"):
    """Single trajectory from ``x_T``; noise drawn from ``rng`` up front."""
    x_T = np.asarray(x_T, dtype=np.float64)
    eps = rng.standard_normal((grid.steps, x_T.size))
    out = rollout_batch(velocity, x_T[None], c, grid, stepper, schedule, eps[None], em_variant)
    return Trajectory(c, grid.times.copy(), out["states"][0], out["means"][0], out["stds"].copy(),
                      eps, out["logps"][0], out["tweedie"][0])


# ---------------------------------------------------------------------------
# marginal matching


@dataclass
class MarginalReport:
    ks_stat: np.ndarray
    ks_p: np.ndarray
    mean_gap: float
    cov_gap: float
    ode_samples: np.ndarray
    sde_samples: np.ndarray

    def passed(self, alpha=0.01, tol=0.05):
        return bool(np.all(self.ks_p > alpha) and self.mean_gap < tol and self.cov_gap < tol)


def marginal_match_test(velocity, stepper, schedule, n, grid_T, rng, c=0, dim=2, em_variant="matched"):
    """Compare final-time samples of the ODE and of an SDE stepper.

    Both samplers start from the same ``n`` draws of ``x_T``; the SDE gets its
    own noise.  Per-dimension two-sample KS plus max mean/covariance gaps.
    """
    if n < 1000:
        raise ValueError("marginal matching needs n >= 1000")
    grid = TimeGrid.uniform(grid_T)
    x_T = rng.standard_normal((n, dim))
    eps = rng.standard_normal((n, grid_T, dim))
    ode = ode_sample(velocity, x_T, grid, c)
    sde = rollout_batch(velocity, x_T, c, grid, stepper, schedule, eps, em_variant)["states"][:, -1]
    ks = [stats.ks_2samp(ode[:, j], sde[:, j]) for j in range(dim)]
    return MarginalReport(
        np.array([r.statistic for r in ks]),
        np.array([r.pvalue for r in ks]),
        float(np.max(np.abs(ode.mean(0) - sde.mean(0)))),
        float(np.max(np.abs(np.cov(ode.T) - np.cov(sde.T)))),
        ode,
        sde,
    )
