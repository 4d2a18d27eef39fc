import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stepgrpo.diffnet import NetConfig, VelocityNet, init_params
from stepgrpo.flowcore import TimeGrid, ode_sample, ode_step, predict_clean, predict_noise
from stepgrpo.harness.checks import em_one_step_variance
from stepgrpo.sde import (NoiseSchedule, ScheduleInfeasible, coefficient_gap, ddim_step, ddim_transition, em_step,
                          em_transition, gaussian_kl, gaussian_logprob, marginal_match_test, rollout, sigma,
                          transition)
from stepgrpo.seeding import stream

X, T, DT, V = np.array([1.0]), 0.5, 0.1, np.array([2.0])


def random_net(seed=0):
    cfg = NetConfig.for_task(2, 2, hidden_widths=(16, 16))
    return VelocityNet(cfg, init_params(cfg, stream(seed, "init")))


def test_sigma_examples():
    assert sigma(NoiseSchedule("flowgrpo", a=0.7), 0.5, 0.1) == pytest.approx(0.7, abs=1e-15)
    assert sigma(NoiseSchedule("ddim", eta=0.9), 0.5, 0.1) == pytest.approx(0.2545584, abs=5e-8)
    assert sigma(NoiseSchedule("ddim", eta=0.9), 1.0, 0.1) == 0.0
    assert sigma(NoiseSchedule("zero"), 0.5, 0.1) == 0.0
    assert sigma(NoiseSchedule("ddim", eta=0.5, ddim_form="linear"), 0.5, 0.1) == pytest.approx(0.2)
    assert sigma(NoiseSchedule("ddim", eta=0.5, ddim_form="t-sqrt"), 0.5, 0.1) == pytest.approx(0.25 * np.sqrt(0.5))


def test_flowgrpo_sigma_is_clamped_at_one():
    s = sigma(NoiseSchedule("flowgrpo", a=0.7), 1.0, 0.1)
    assert np.isfinite(s) and s == pytest.approx(0.7 * np.sqrt(0.95 / 0.05))


def test_schedule_validation():
    for kw in ({"kind": "other"}, {"kind": "flowgrpo", "a": 0.0}, {"kind": "ddim", "eta": 1.5},
               {"ddim_form": "cubic"}):
        with pytest.raises(ValueError):
            NoiseSchedule(**kw)


def test_em_sigma_zero_is_ode_step():
    out = em_step(X, T, DT, V, 0.0, np.array([3.7]))
    assert np.isclose(out[0], 0.8, rtol=0, atol=1e-15)
    tr = em_transition(X, T, DT, V, 0.0)
    assert tr.std == 0.0 and np.isclose(tr.mean[0], 0.8, rtol=0, atol=1e-15)


def test_em_literal_variant_examples():
    assert em_step(X, T, DT, V, 0.2, np.zeros(1), "literal")[0] == pytest.approx(0.808, abs=1e-14)
    assert em_step(X, T, DT, V, 0.2, np.ones(1), "literal")[0] == pytest.approx(0.8712456, abs=5e-8)
    tr = em_transition(X, T, DT, V, 0.2, "literal")
    assert tr.mean[0] == pytest.approx(0.808, abs=1e-14)
    assert tr.std == pytest.approx(0.0632456, abs=5e-8)


def test_em_matched_variant_flips_correction():
    # drift v + σ²/(2t)·x̂1 = 2 + 0.04·2 = 2.08
    tr = em_transition(X, T, DT, V, 0.2)
    assert tr.mean[0] == pytest.approx(0.792, abs=1e-14)
    assert tr.std == pytest.approx(0.2 * np.sqrt(0.1), abs=1e-15)


@given(st.floats(0.05, 1.0), st.floats(0.0, 2.0), st.sampled_from(["matched", "literal"]), st.integers(0, 1000))
def test_em_step_is_mean_plus_std_eps(t, sig, variant, seed):
    rng = stream(seed, "em")
    x, v, eps = rng.standard_normal((3, 2))
    dt = t / 4
    tr = em_transition(x, t, dt, v, sig, variant)
    assert np.array_equal(em_step(x, t, dt, v, sig, eps, variant), tr.mean + tr.std * eps)


def test_em_rejects_t_zero():
    with pytest.raises(ValueError):
        em_transition(X, 0.0, 0.0, V, 0.2)


def test_ddim_examples():
    x0, x1 = np.array([0.0]), np.array([2.0])
    assert ddim_step(x0, x1, T, DT, 0.0, np.ones(1))[0] == pytest.approx(0.8, abs=1e-15)
    assert ddim_step(x0, x1, T, DT, 0.1, np.zeros(1))[0] == pytest.approx(0.7745967, abs=5e-8)
    assert ddim_step(np.array([1.5]), x1, T, DT, 0.4, np.zeros(1))[0] == pytest.approx(0.6 * 1.5, abs=1e-15)
    tr = ddim_transition(x0, x1, T, DT, 0.1)
    assert tr.mean[0] == pytest.approx(np.sqrt(0.15) * 2, abs=1e-15) and tr.std == 0.1
    assert ddim_transition(x0, x1, T, DT, 0.0).mean[0] == pytest.approx(0.8, abs=1e-15)
    assert ddim_transition(np.array([1.5]), x1, T, DT, 0.4).mean[0] == pytest.approx(0.9, abs=1e-15)


def test_ddim_infeasible_names_inputs():
    with pytest.raises(ScheduleInfeasible) as info:
        ddim_step(np.zeros(1), np.ones(1), 0.5, 0.1, 0.45, np.zeros(1))
    msg = str(info.value)
    assert "t=0.5" in msg and "dt=0.1" in msg and "sigma=0.45" in msg


@given(arrays(np.float64, 2, elements=st.floats(-5, 5)), arrays(np.float64, 2, elements=st.floats(-5, 5)),
       st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_sigma_zero_collapse(x, v, t, frac):
    dt = frac * t
    ode = ode_step(lambda *_: v, x, t, dt, 0)
    eps = np.ones(2)
    assert np.allclose(em_step(x, t, dt, v, 0.0, eps), ode, rtol=0, atol=1e-12)
    ddim = ddim_step(predict_clean(x, t, v), predict_noise(x, t, v), t, dt, 0.0, eps)
    assert np.allclose(ddim, ode, rtol=0, atol=1e-12)
    assert np.allclose(transition("ddim", x, t, dt, v, 0.0).mean, ode, rtol=0, atol=1e-12)


def test_ddim_preserves_variance_and_em_exceeds_it():
    rng = stream(0, "variance")
    n = 100_000
    x0hat = np.full((n, 2), 0.3)
    for t, dt, frac in ((0.5, 0.1, 0.5), (0.9, 0.2, 0.75), (1.0, 0.1, 0.25)):
        s = t - dt
        sig = frac * s
        x1hat = rng.standard_normal((n, 2))
        eps = rng.standard_normal((n, 2))
        var = ddim_step(x0hat, x1hat, t, dt, sig, eps).var(axis=0)
        assert np.all(np.abs(var / s ** 2 - 1) < 0.02), var
        x = (1 - t) * x0hat + t * x1hat
        v = x1hat - x0hat
        for variant in ("matched", "literal"):
            emp = em_step(x, t, dt, v, sig, eps, variant).var(axis=0)
            closed = em_one_step_variance(t, dt, sig, variant)
            assert np.all(np.abs(emp / closed - 1) < 0.02)
            assert closed > s ** 2
        assert em_one_step_variance(t, dt, sig, "literal") == pytest.approx(
            (s + sig ** 2 * dt / (2 * t)) ** 2 + sig ** 2 * dt)


def test_coefficient_gap_examples_and_sweep():
    assert coefficient_gap(0.5, 0.1, 0.0) == pytest.approx((0.4, 0.4, 0.4), abs=1e-15)
    ddim, exact, taylor = coefficient_gap(0.5, 0.1, 0.1)
    assert ddim == pytest.approx(0.3872983, abs=5e-8)
    assert exact == pytest.approx(0.39, abs=1e-15)
    assert taylor == pytest.approx(0.3875, abs=1e-15)
    assert taylor - ddim == pytest.approx(2.017e-4, abs=1e-6)
    for t in np.linspace(0.2, 1.0, 10):
        for ratio in np.linspace(0.05, 0.8, 10):
            dt = 0.1 * t
            s = t - dt
            sig = ratio * s
            d, _, tay = coefficient_gap(t, dt, sig)
            assert abs(d - tay) <= sig ** 4 / (4 * s ** 3)
    with pytest.raises(ScheduleInfeasible):
        coefficient_gap(0.5, 0.1, 0.5)


def test_logprob_examples():
    assert gaussian_logprob(np.zeros(1), np.zeros(1), 1.0) == pytest.approx(-0.9189385, abs=5e-8)
    d, s = 3, 0.3
    m = np.array([0.1, -2.0, 4.0])
    assert gaussian_logprob(m, m, s) == pytest.approx(-d * (0.5 * np.log(2 * np.pi) + np.log(s)), abs=1e-14)
    with pytest.raises(ValueError):
        gaussian_logprob(m, m, 0.0)


@given(arrays(np.float64, 2, elements=st.floats(-5, 5)), arrays(np.float64, 2, elements=st.floats(-5, 5)),
       arrays(np.float64, 2, elements=st.floats(-5, 5)), st.floats(0.05, 3))
def test_logprob_translation_invariance(x, m, shift, s):
    assert gaussian_logprob(x + shift, m + shift, s) == pytest.approx(gaussian_logprob(x, m, s), abs=1e-9)


def test_kl_examples():
    m = np.array([0.4, -0.2])
    assert gaussian_kl(m, 0.3, m, 0.3) == 0.0
    assert gaussian_kl(np.array([1.0]), 0.5, np.array([0.0]), 0.5) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError):
        gaussian_kl(m, 0.0, m, 1.0)


@given(arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-5, 5)),
       st.floats(0.01, 5), st.floats(0.01, 5))
def test_kl_nonnegative(m1, m2, s1, s2):
    assert gaussian_kl(m1, s1, m2, s2) >= -1e-12


def test_rollout_zero_schedule_is_ode():
    net = random_net(1)
    grid = TimeGrid.uniform(10)
    x_T = np.array([0.3, -1.1])
    for stepper in ("em", "ddim"):
        tr = rollout(net, x_T, 1, grid, stepper, NoiseSchedule("zero"), stream(0, "r"))
        ode = ode_sample(net, x_T[None], grid, 1)[0]
        assert np.allclose(tr.states[-1], ode, rtol=0, atol=1e-12)
        assert np.all(np.isnan(tr.logps))


@pytest.mark.parametrize("stepper,schedule", [("em", NoiseSchedule()), ("ddim", NoiseSchedule("ddim"))])
def test_rollout_replay_and_determinism(stepper, schedule):
    net = random_net(2)
    grid = TimeGrid.uniform(10)
    x_T = stream(2, "xT").standard_normal(2)
    a = rollout(net, x_T, 0, grid, stepper, schedule, stream(2, "traj"))
    b = rollout(net, x_T, 0, grid, stepper, schedule, stream(2, "traj"))
    assert a.states.shape == (11, 2) and a.steps == 10
    assert np.array_equal(a.states[0], x_T)
    assert a.replay_error() <= 1e-12
    for name in ("states", "means", "stds", "eps", "logps", "tweedie"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True)
    # stored log-probs are the density of each realised state; noiseless steps carry NaN
    for k in range(10):
        if a.stds[k] == 0:
            assert np.isnan(a.logps[k])
            continue
        assert a.logps[k] == pytest.approx(gaussian_logprob(a.states[k + 1], a.means[k], a.stds[k]), abs=1e-12)


def test_marginal_zero_schedule_is_identical():
    rep = marginal_match_test(random_net(3), "em", NoiseSchedule("zero"), 1000, 20, stream(0, "m"))
    assert np.all(rep.ks_stat == 0) and rep.mean_gap == 0 and rep.cov_gap == 0 and rep.passed()
    with pytest.raises(ValueError):
        marginal_match_test(random_net(3), "em", NoiseSchedule("zero"), 999, 20, stream(0, "m"))
