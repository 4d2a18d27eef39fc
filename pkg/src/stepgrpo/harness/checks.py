"""Invariant checks shared by ``verify`` and the acceptance tests.

Each check returns a :class:`CheckResult`; ``run_checks`` times them.  Passing
``fault='gradient'`` scales every analytic gradient by 1.1 before it is
compared with finite differences, which must make the gradient checks fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import credit
from ..diffnet import (NetConfig, ParamVector, finite_diff_check, finite_diff_error, forward, grad_params,
                       init_params)
from ..flowcore import fm_loss, ode_step
from ..grpo import PolicyTriple, TrainConfig, objective, on_policy_objective, rollout_group
from ..sde import NoiseSchedule, coefficient_gap, ddim_step, em_step, em_transition, marginal_match_test
from ..seeding import stream
from . import config as config_mod
from .runs import run_pretrain

GRAD_TOL = 1e-4
GRAD_INSTANCES = 20
FAULT_SCALE = 1.1


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)


class Context:
    """Lazily built shared fixtures (the pretrained reference net)."""

    def __init__(self, fault=None, exp=None, net=None):
        if fault not in (None, "gradient"):
            raise ValueError(f"unknown fault {fault!r}")
        self.fault = fault
        self.exp = exp or config_mod.reference()
        self._net = net

    def reference_net(self):
        if self._net is None:
            self._net = run_pretrain(self.exp).net
        return self._net

    def corrupt(self, grad):
        return grad * FAULT_SCALE if self.fault == "gradient" else grad


# ---------------------------------------------------------------------------
# gradient fidelity

_SMALL_NET = NetConfig.for_task(2, 2, hidden_widths=(8, 8))
_REWARD = config_mod.reference().reward


def _grad_fm(ctx):
    worst = 0.0
    for k in range(GRAD_INSTANCES):
        rng = stream(k, "check", "fm")
        params = init_params(_SMALL_NET, rng)
        x0, x1 = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        t, c = rng.random(8), rng.integers(0, 2, 8)

        def loss(f):
            return fm_loss(f, x0, x1, t, c)

        _, grad = grad_params(_SMALL_NET, params, loss)
        worst = max(worst, finite_diff_check(_SMALL_NET, params, loss, grad=ctx.corrupt(grad.values)))
    return worst


def _objective_instance(k, method):
    """Small random batch: N=3, T=4, θ near θ_old, both near but not at θ_ref."""
    rng = stream(k, "check", method)
    stepper, schedule = (("em", NoiseSchedule()), ("ddim", NoiseSchedule("ddim")))[k % 2]
    ref = init_params(_SMALL_NET, rng)
    theta = ParamVector(ref.values + 0.05 * rng.standard_normal(len(ref)), ref.layout)
    old = ParamVector(theta.values + 1e-3 * rng.standard_normal(len(ref)), ref.layout)
    cfg = TrainConfig(N=3, T=4, substeps=2, stepper=stepper, schedule=schedule, method=method)

    def velocity(x, t, c):
        return forward(_SMALL_NET, old, x, t, c)

    rngs = [stream(k, "check", method, "traj", i) for i in range(cfg.N)]
    group = rollout_group(velocity, int(rng.integers(0, 2)), rng.standard_normal(2), cfg, _REWARD, rngs)
    adv, _ = credit.advantages(method, group.stack("rewards"))
    return cfg, group, adv, PolicyTriple(theta, old, ref)


def _grad_objective(ctx, method):
    beta, clip_eps = 0.1, 0.2
    worst = 0.0
    for k in range(GRAD_INSTANCES):
        cfg, group, adv, triple = _objective_instance(k, method)

        def value(vals):
            tri = PolicyTriple(ParamVector(vals, triple.theta.layout), triple.theta_old, triple.theta_ref)
            return objective(_SMALL_NET, [group], [adv], tri, beta, clip_eps, cfg.stepper, cfg.schedule,
                             method=method).value

        res = objective(_SMALL_NET, [group], [adv], triple, beta, clip_eps, cfg.stepper, cfg.schedule,
                        method=method)
        # res.grad is ∇(-J); compare ∇J against differences of J
        worst = max(worst, finite_diff_error(value, triple.theta, ctx.corrupt(-res.grad.values)))
    return worst


def _gradient_check(name, fn):
    def run(ctx):
        worst = fn(ctx)
        return CheckResult(name, worst < GRAD_TOL, f"max rel err {worst:.3e} over {GRAD_INSTANCES} instances "
                           f"(tol {GRAD_TOL:g})", values={"max_rel_err": worst, "instances": GRAD_INSTANCES})
    return run


# ---------------------------------------------------------------------------
# algebra


def check_telescoping(ctx):
    rng = stream(0, "check", "telescoping")
    r = rng.random((10_000, 11))
    g = credit.gains(r)
    err = float(np.max(np.abs(g.sum(axis=1) - (r[:, -1] - r[:, 0]))))
    return CheckResult("telescoping", err <= 1e-12, f"max |Σg - (r_0 - r_T)| = {err:.2e} on 10^4 rows",
                       values={"max_err": err})


def check_sigma_zero(ctx):
    rng = stream(0, "check", "sigma-zero")
    n = 1000
    t = rng.uniform(0.05, 1.0, n)
    dt = t * rng.uniform(0.0, 1.0, n)
    x, v, eps = rng.standard_normal((3, n, 2))

    def vel(_x, _t, _c):
        return v

    ode = ode_step(vel, x, t, dt, 0)
    em = em_step(x, t, dt, v, np.zeros(n), eps)
    tc = t[:, None]
    ddim = ddim_step(x - tc * v, x + (1 - tc) * v, t, dt, np.zeros(n), eps)
    err_em = float(np.max(np.abs(em - ode)))
    err_ddim = float(np.max(np.abs(ddim - ode)))
    ok = err_em <= 1e-12 and err_ddim <= 1e-12
    return CheckResult("sigma-zero", ok, f"em {err_em:.1e}, ddim {err_ddim:.1e} over {n} points",
                       values={"em": err_em, "ddim": err_ddim})


VARIANCE_T = (0.4, 0.7, 1.0)
VARIANCE_DT = 0.1
VARIANCE_FRACS = (0.25, 0.5, 0.75)


def variance_grid():
    return [(t, VARIANCE_DT, f * (t - VARIANCE_DT)) for t in VARIANCE_T for f in VARIANCE_FRACS]


def em_one_step_variance(t, dt, sig, variant="matched"):
    """Exact next-state variance from ``x = t·z`` (``x̂0 = 0``, ``v = z``, ``Var z = 1``)."""
    tr = em_transition(np.array([[t]]), np.array([t]), dt, np.array([[1.0]]), sig, variant)
    coef = float(tr.mean[0, 0])  # mean is linear in z; this is its coefficient
    return coef ** 2 + float(tr.std) ** 2


def check_variance(ctx):
    rng = stream(0, "check", "variance")
    n = 100_000
    worst, em_margin, lines = 0.0, np.inf, []
    for t, dt, sig in variance_grid():
        s = t - dt
        x1hat = rng.standard_normal(n)
        eps = rng.standard_normal(n)
        x = ddim_step(np.zeros(n), x1hat, t, dt, sig, eps)
        rel = abs(x.var() / s ** 2 - 1.0)
        worst = max(worst, rel)
        margins = [em_one_step_variance(t, dt, sig, var) - s ** 2 for var in ("matched", "literal")]
        em_margin = min(em_margin, *margins)
    ok = worst <= 0.02 and em_margin > 0
    lines.append(f"ddim max rel dev {worst:.4f} (tol 0.02)")
    lines.append(f"em min excess {em_margin:.3e} (must be > 0)")
    return CheckResult("variance", ok, "; ".join(lines), values={"ddim_rel": worst, "em_excess": em_margin})


TAYLOR_RATIO = (0.05, 0.8)


def taylor_sweep():
    ts = np.linspace(0.2, 1.0, 10)
    ratios = np.linspace(*TAYLOR_RATIO, 10)
    return [(t, 0.1, r * (t - 0.1)) for t in ts for r in ratios]


def check_taylor(ctx):
    worst = -np.inf
    for t, dt, sig in taylor_sweep():
        ddim, _, taylor = coefficient_gap(t, dt, sig)
        s = t - dt
        worst = max(worst, abs(ddim - taylor) - sig ** 4 / (4 * s ** 3))
    ddim, _, taylor = coefficient_gap(0.5, 0.1, 0.1)
    spot = abs(ddim - taylor)
    ok = worst <= 0 and abs(spot - 2.02e-4) <= 5e-6
    return CheckResult("taylor", ok, f"max(gap - bound) {worst:.2e} on 100 points; spot gap {spot:.4e}",
                       values={"excess": worst, "spot": spot})


def check_on_policy(ctx):
    rng = stream(0, "check", "on-policy")
    ref = init_params(_SMALL_NET, rng)
    theta = ParamVector(ref.values + 0.05 * rng.standard_normal(len(ref)), ref.layout)
    triple = PolicyTriple(theta, theta.copy(), ref)
    cfg = TrainConfig(N=4, T=10, substeps=3)

    def velocity(x, t, c):
        return forward(_SMALL_NET, theta, x, t, c)

    rngs = [stream(0, "check", "on-policy", i) for i in range(cfg.N)]
    group = rollout_group(velocity, 0, rng.standard_normal(2), cfg, _REWARD, rngs)
    g = group.stack("gains")
    beta = 0.1
    base, grad = on_policy_objective(_SMALL_NET, [group], [g], triple, beta)
    values = [objective(_SMALL_NET, [group], [g], triple, beta, eps) for eps in (0.1, 0.2, 0.5)]
    gap = max(abs(v.value - base) for v in values)
    spread = max(v.value for v in values) - min(v.value for v in values)
    grad_gap = float(np.max(np.abs(values[0].grad.values - grad.values)))
    ok = gap <= 1e-10 and spread <= 1e-12
    return CheckResult("on-policy", ok, f"|J - J_on| {gap:.1e}, ε-spread {spread:.1e}, grad gap {grad_gap:.1e}",
                       values={"gap": gap, "spread": spread, "grad_gap": grad_gap})


def check_normalization(ctx):
    g = np.array([[1.0, 3.0], [2.0, 2.0]])
    joint = credit.joint_normalize(g)
    per = credit.perstep_normalize(g)
    want_joint = np.array([[-1.4142136, 1.4142136], [0.0, 0.0]])
    want_per = np.array([[-1.0, 1.0], [1.0, -1.0]])
    ej = float(np.max(np.abs(joint - want_joint)))
    ep = float(np.max(np.abs(per - want_per)))
    return CheckResult("normalization", ej <= 1e-7 and ep <= 1e-7, f"joint err {ej:.1e}, per-step err {ep:.1e}",
                       values={"joint": ej, "perstep": ep})


MARGINAL_SCHEDULES = {"em": NoiseSchedule("flowgrpo", a=0.7), "ddim": NoiseSchedule("ddim", eta=0.9)}


def _marginal(stepper):
    def run(ctx):
        rep = marginal_match_test(ctx.reference_net(), stepper, MARGINAL_SCHEDULES[stepper], 4096, 200,
                                  stream(0, "verify", "marginal", stepper), c=0)
        detail = (f"KS p {np.array2string(rep.ks_p, precision=4)}, mean gap {rep.mean_gap:.4f}, "
                  f"cov gap {rep.cov_gap:.4f} (p > 0.01, gaps < 0.05)")
        return CheckResult(f"marginal-{stepper}", rep.passed(), detail,
                           values={"ks_p": rep.ks_p.tolist(), "mean_gap": rep.mean_gap, "cov_gap": rep.cov_gap})
    return run


CHECKS = {
    "gradient-fm": _gradient_check("gradient-fm", _grad_fm),
    "gradient-uniform": _gradient_check("gradient-uniform", lambda ctx: _grad_objective(ctx, "uniform")),
    "gradient-stepwise": _gradient_check("gradient-stepwise", lambda ctx: _grad_objective(ctx, "stepwise-joint")),
    "gradient-pdistill": _gradient_check("gradient-pdistill", lambda ctx: _grad_objective(ctx, "pdistill")),
    "telescoping": check_telescoping,
    "sigma-zero": check_sigma_zero,
    "variance": check_variance,
    "taylor": check_taylor,
    "on-policy": check_on_policy,
    "normalization": check_normalization,
    "marginal-em": _marginal("em"),
    "marginal-ddim": _marginal("ddim"),
}


def run_check(name, ctx):
    start = time.perf_counter()
    res = CHECKS[name](ctx)
    res.seconds = time.perf_counter() - start
    return res


def run_checks(name_filter=None, ctx=None, on_result=None):
    ctx = ctx or Context()
    names = [n for n in CHECKS if name_filter is None or name_filter in n]
    results = []
    for name in names:
        res = run_check(name, ctx)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results
