"""Group-relative policy optimisation for flow samplers.

The policy is the Gaussian transition of an SDE stepper; its mean depends on
the velocity network and its std only on the noise schedule.  The objective
averages, over every transition of every trajectory in a batch of groups,

    min(ρ·A, clip(ρ, 1-ε, 1+ε)·A) - β·KL(π_θ || π_ref)

with ``ρ = π_θ / π_old`` evaluated at the stored states.  Transitions whose
std is zero (the first and last ddim steps) carry no policy and are skipped;
the average still divides by the full transition count.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import credit
from .diffnet import NetConfig, OptState, ParamVector, adamw_step, clip, forward, grad_params, minimum
from .flowcore import TimeGrid, _ndim, predict_clean, predict_noise
from .rewardlab import group_stepwise_rewards
from .sde import Group, NoiseSchedule, Trajectory, gaussian_kl, gaussian_logprob, rollout_batch, sigma, transition
from .seeding import stream

log = logging.getLogger(__name__)

LOG_RATIO_LIMIT = 30.0
clamp_counter = Counter()


class TrainingAborted(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    N: int = 16
    T: int = 10
    substeps: int = 5
    beta: float = 1e-3
    clip_eps: float = 0.2
    stepper: str = "em"
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    method: str = "stepwise-joint"
    inner_epochs: int = 1
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    iterations: int = 200
    seed: int = 0
    em_variant: str = "matched"
    ema_alpha: float = 0.99
    gae_gamma: float = 0.95
    gae_direction: str = "toward-final"

    def __post_init__(self):
        checks = [
            (self.N >= 2, "N must be >= 2"),
            (self.T >= 2, "T must be >= 2"),
            (self.substeps >= 1, "substeps must be >= 1"),
            (0.0 <= self.clip_eps <= 1.0, "clip_eps must lie in [0, 1]"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.inner_epochs >= 1, "inner_epochs must be >= 1"),
            (self.stepper in ("em", "ddim"), f"unknown stepper {self.stepper!r}"),
            (self.method in credit.METHODS, f"unknown advantage method {self.method!r}"),
            (self.method != "pdistill" or self.T >= 3, "pdistill needs T >= 3"),
            (self.lr > 0, "lr must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def grid(self):
        return TimeGrid.uniform(self.T)

    def optimizer(self, n):
        return OptState.zeros(n, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)

    def credit_state(self):
        return credit.CreditState(None, credit.GaeConfig(self.gae_gamma, self.gae_direction))


@dataclass
class PolicyTriple:
    theta: ParamVector
    theta_old: ParamVector
    theta_ref: ParamVector

    @classmethod
    def from_reference(cls, ref):
        return cls(ref.copy(), ref.copy(), ref.copy())


@dataclass
class IterationMetrics:
    iteration: int
    context: int
    mean_final_reward: float
    reward_curve: np.ndarray
    gain_profile: np.ndarray
    objective: float
    mean_kl: float
    clip_frac: float
    wall_ms: float


# ---------------------------------------------------------------------------
# scalar pieces


def ratio(logp_new, logp_old):
    """``exp(logp_new - logp_old)`` with the exponent clamped to ±30."""
    diff = np.asarray(logp_new, dtype=np.float64) - logp_old
    over = np.abs(diff) > LOG_RATIO_LIMIT
    if np.any(over):
        clamp_counter["ratio"] += int(np.sum(over))
        log.warning("clamped %d log-ratios to ±%g", int(np.sum(over)), LOG_RATIO_LIMIT)
    return np.exp(np.clip(diff, -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT))


def clipped_term(rho, adv, clip_eps):
    return minimum(rho * adv, clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def pdistill_term(x0hat, x1hat, t_target, x0hat_target):
    """``-‖x̂0(t-2Δt) - μ‖²`` with ``μ = x̂0(t)·(1-t') + x̂1(t)·t'``, ``t' = t-2Δt``."""
    tt = np.asarray(t_target, dtype=np.float64)
    if _ndim(x0hat) == 2 and tt.ndim == 1:
        tt = tt[:, None]
    mu = x0hat * (1.0 - tt) + x1hat * tt
    diff = x0hat_target - mu
    return -(diff * diff).sum(axis=-1)


# ---------------------------------------------------------------------------
# batching


@dataclass
class _Batch:
    """All transitions of a list of groups, flattened i-major, t-minor."""

    x: np.ndarray
    x_next: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    sig: np.ndarray
    std: np.ndarray
    c: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    total: int


def _flatten(groups, advs, schedule):
    xs, xn, ts, dts, cs, lp, aa = [], [], [], [], [], [], []
    for grp, adv in zip(groups, advs):
        states = grp.stack("states")
        n, tp1, d = states.shape
        times = grp.trajectories[0].times
        if np.shape(adv) != (n, tp1 - 1):
            raise ValueError(f"advantages shaped {np.shape(adv)}, expected {(n, tp1 - 1)}")
        xs.append(states[:, :-1].reshape(-1, d))
        xn.append(states[:, 1:].reshape(-1, d))
        ts.append(np.tile(times[:-1], n))
        dts.append(np.tile(times[:-1] - times[1:], n))
        cs.append(np.full(n * (tp1 - 1), grp.c))
        lp.append(grp.stack("logps").ravel())
        aa.append(np.asarray(adv, dtype=np.float64).ravel())
    t, dt = np.concatenate(ts), np.concatenate(dts)
    sig = sigma(schedule, t, dt)
    x = np.concatenate(xs)
    b = _Batch(x, np.concatenate(xn), t, dt, sig, np.zeros_like(t), np.concatenate(cs),
               np.concatenate(lp), np.concatenate(aa), len(t))
    return b


def _policy(stepper, schedule, x, t, dt, sig, v, em_variant):
    tr = transition(stepper, x, t, dt, v, sig, em_variant)
    return tr.mean, np.broadcast_to(tr.std, t.shape)


def _stochastic(b, stepper, schedule, em_variant):
    """Keep only transitions with positive std; fills ``b.std``."""
    zero_v = np.zeros_like(b.x)
    _, std = _policy(stepper, schedule, b.x, b.t, b.dt, b.sig, zero_v, em_variant)
    keep = std > 0
    sub = _Batch(b.x[keep], b.x_next[keep], b.t[keep], b.dt[keep], b.sig[keep], std[keep],
                 b.c[keep], b.logp_old[keep], b.adv[keep], b.total)
    return sub


@dataclass
class ObjectiveResult:
    value: float
    grad: ParamVector  # gradient of -J, ready for a descent step
    mean_kl: float
    clip_frac: float


def _surrogate_parts(apply_v, b, stepper, schedule, em_variant, mu_ref):
    v = apply_v(b.x, b.t, b.c)
    mean, std = _policy(stepper, schedule, b.x, b.t, b.dt, b.sig, v, em_variant)
    logp = gaussian_logprob(b.x_next, mean, std)
    kl = gaussian_kl(mean, std, mu_ref, std)
    return logp, kl


def _ref_means(config, theta_ref, b, stepper, schedule, em_variant):
    v_ref = forward(config, theta_ref, b.x, b.t, b.c)
    return _policy(stepper, schedule, b.x, b.t, b.dt, b.sig, v_ref, em_variant)[0]


def objective(config, groups, advs, triple, beta, clip_eps, stepper="em", schedule=NoiseSchedule(),
              em_variant="matched", method=None):
    """Clipped surrogate minus KL anchor; returns :class:`ObjectiveResult`.

    ``method='pdistill'`` swaps the ratio surrogate for the advantage-weighted
    distillation term between successive clean estimates (KL anchor kept).
    """
    b = _stochastic(_flatten(groups, advs, schedule), stepper, schedule, em_variant)
    mu_ref = _ref_means(config, triple.theta_ref, b, stepper, schedule, em_variant)
    stats = {}

    if method == "pdistill":
        pd = _pdistill_batch(groups, advs)

        def neg_j(apply_v):
            _, kl = _surrogate_parts(apply_v, b, stepper, schedule, em_variant, mu_ref)
            stats["kl"] = kl.value
            dist = _pdistill_value(apply_v, pd)
            return -(dist - beta * kl.sum() * (1.0 / b.total))

        value, grad = grad_params(config, triple.theta, neg_j)
        kl = stats["kl"]
        return ObjectiveResult(-value, grad, float(kl.sum() / b.total), 0.0)

    def neg_j(apply_v):
        logp, kl = _surrogate_parts(apply_v, b, stepper, schedule, em_variant, mu_ref)
        log_ratio = clip(logp - b.logp_old, -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)
        rho = log_ratio.exp()
        stats["rho"], stats["kl"] = rho.value, kl.value
        surr = clipped_term(rho, b.adv, clip_eps)
        return -((surr - beta * kl).sum() * (1.0 / b.total))

    value, grad = grad_params(config, triple.theta, neg_j)
    rho = stats["rho"]
    clipped = np.sum(np.abs(rho - 1.0) > clip_eps) / max(len(rho), 1)
    return ObjectiveResult(-value, grad, float(stats["kl"].sum() / b.total), float(clipped))


def on_policy_objective(config, groups, gains, triple, beta, stepper="em", schedule=NoiseSchedule(),
                        em_variant="matched"):
    """Raw-gain policy gradient minus KL, valid only when ``θ_old = θ``.

    Returns ``(value, grad)`` where ``value = Σ g / NT - β·mean KL`` and ``grad``
    is the gradient of ``-value`` computed as ``-Σ g ∇log π / NT + β ∇KL``.
    """
    if not np.array_equal(triple.theta.values, triple.theta_old.values):
        raise ValueError("on-policy objective requires theta_old == theta")
    b = _stochastic(_flatten(groups, gains, schedule), stepper, schedule, em_variant)
    mu_ref = _ref_means(config, triple.theta_ref, b, stepper, schedule, em_variant)
    kl_value = {}

    def neg_surrogate(apply_v):
        logp, kl = _surrogate_parts(apply_v, b, stepper, schedule, em_variant, mu_ref)
        kl_value["kl"] = kl.value
        return -(((logp - logp.value) * b.adv).sum() * (1.0 / b.total) - beta * kl.sum() * (1.0 / b.total))

    _, grad = grad_params(config, triple.theta, neg_surrogate)
    value = b.adv.sum() / b.total - beta * kl_value["kl"].sum() / b.total
    return float(value), grad


# ---------------------------------------------------------------------------
# progressive distillation


@dataclass
class _PdBatch:
    x: np.ndarray
    t: np.ndarray
    x_tgt: np.ndarray
    t_tgt: np.ndarray
    c: np.ndarray
    adv: np.ndarray
    count: int


def _pdistill_batch(groups, advs):
    xs, ts, xt, tt, cs, aa = [], [], [], [], [], []
    for grp, adv in zip(groups, advs):
        states = grp.stack("states")
        n, tp1, d = states.shape
        if tp1 - 1 < 3:
            raise ValueError("progressive distillation needs T >= 3")
        times = grp.trajectories[0].times
        xs.append(states[:, :-2].reshape(-1, d))
        xt.append(states[:, 2:].reshape(-1, d))
        ts.append(np.tile(times[:-2], n))
        tt.append(np.tile(times[2:], n))
        cs.append(np.full(n * (tp1 - 2), grp.c))
        aa.append(np.asarray(adv)[:, : tp1 - 2].ravel())
    cat = np.concatenate
    return _PdBatch(cat(xs), cat(ts), cat(xt), cat(tt), cat(cs), cat(aa), sum(len(a) for a in aa))


def _pdistill_value(apply_v, pd):
    v = apply_v(pd.x, pd.t, pd.c)
    v_tgt = apply_v(pd.x_tgt, pd.t_tgt, pd.c)
    tc, ttc = pd.t[:, None], pd.t_tgt[:, None]
    terms = pdistill_term(predict_clean(pd.x, tc, v), predict_noise(pd.x, tc, v), pd.t_tgt,
                          predict_clean(pd.x_tgt, ttc, v_tgt))
    return (terms * pd.adv).sum() * (1.0 / pd.count)


def pdistill_loss(velocity, traj, adv):
    """Advantage-weighted distillation objective for one trajectory."""
    grp = Group(traj.states[0], traj.c, [traj])
    return float(_pdistill_value(velocity, _pdistill_batch([grp], [np.atleast_2d(adv)])))


# ---------------------------------------------------------------------------
# rollout and training


def rollout_group(velocity, c, x_T, config, reward_spec, traj_rngs):
    """``N`` rollouts from a shared ``x_T`` with stepwise rewards and gains.

    ``traj_rngs[i]`` supplies the ``T×d`` transition noise of trajectory ``i``.
    A single trajectory is allowed for diagnostics but logs a warning.
    """
    grid = config.grid
    x_T = np.asarray(x_T, dtype=np.float64)
    n, d = len(traj_rngs), x_T.size
    if n < 2:
        log.warning("group of %d trajectory: advantages are undefined and will be zero", n)
    eps = np.stack([rng.standard_normal((grid.steps, d)) for rng in traj_rngs])
    start = np.broadcast_to(x_T, (n, d))
    out = rollout_batch(velocity, start, c, grid, config.stepper, config.schedule, eps, config.em_variant)
    rewards = group_stepwise_rewards(velocity, out["states"], grid.times, config.substeps, reward_spec, c)
    g = credit.gains(rewards)
    trajs = [
        Trajectory(c, grid.times.copy(), out["states"][i], out["means"][i], out["stds"].copy(), eps[i],
                   out["logps"][i], out["tweedie"][i], rewards[i], g[i])
        for i in range(n)
    ]
    return Group(x_T.copy(), c, trajs)


@dataclass
class TrainState:
    net_config: NetConfig
    triple: PolicyTriple
    opt: OptState
    credit: credit.CreditState
    iteration: int = 0

    @classmethod
    def start(cls, net_config, theta_ref, config):
        return cls(net_config, PolicyTriple.from_reference(theta_ref), config.optimizer(len(theta_ref)),
                   config.credit_state())


def draw_group_inputs(seed, iteration, n_contexts, dim):
    """Context id and shared initial noise for one iteration (method-independent)."""
    rng = stream(seed, "group", iteration)
    c = int(rng.integers(0, n_contexts))
    return c, rng.standard_normal(dim)


def train_iteration(state, config, reward_spec, n_contexts):
    """One pass of sample → score → advantages → ``inner_epochs`` AdamW steps."""
    start = time.perf_counter()
    cfg = state.net_config
    it = state.iteration
    theta_old = state.triple.theta.copy()
    triple = PolicyTriple(state.triple.theta, theta_old, state.triple.theta_ref)

    def velocity(x, t, c):
        return forward(cfg, theta_old, x, t, c)

    c, x_T = draw_group_inputs(config.seed, it, n_contexts, cfg.output_dim)
    rngs = [stream(config.seed, "traj", it, i) for i in range(config.N)]
    group = rollout_group(velocity, c, x_T, config, reward_spec, rngs)
    rewards = group.stack("rewards")
    adv, credit_state = credit.advantages(config.method, rewards, state.credit)

    params, opt = triple.theta, state.opt
    first, clip_fracs = None, []
    for _ in range(config.inner_epochs):
        res = objective(cfg, [group], [adv], PolicyTriple(params, theta_old, triple.theta_ref), config.beta,
                        config.clip_eps, config.stepper, config.schedule, config.em_variant, config.method)
        if not np.isfinite(res.value) or not np.all(np.isfinite(res.grad.values)):
            raise TrainingAborted(f"non-finite objective at iteration {it}", state)
        first = first or res
        clip_fracs.append(res.clip_frac)
        params, opt = adamw_step(params, res.grad, opt)

    new_state = replace(state, triple=PolicyTriple(params, theta_old, triple.theta_ref), opt=opt,
                        credit=credit_state, iteration=it + 1)
    g = group.stack("gains")
    metrics = IterationMetrics(
        iteration=it,
        context=c,
        mean_final_reward=float(rewards[:, -1].mean()),
        reward_curve=rewards.mean(axis=0),
        gain_profile=np.abs(g).mean(axis=0),
        objective=first.value,
        mean_kl=first.mean_kl,
        clip_frac=float(np.mean(clip_fracs)),
        wall_ms=(time.perf_counter() - start) * 1e3,
    )
    return new_state, metrics


def train(theta_ref, net_config, config, reward_spec, n_contexts, callback=None):
    """Run ``config.iterations`` iterations; returns ``(state, [metrics])``."""
    state = TrainState.start(net_config, theta_ref, config)
    history = []
    for _ in range(config.iterations):
        state, m = train_iteration(state, config, reward_spec, n_contexts)
        history.append(m)
        if callback is not None:
            callback(m)
    return state, history
