import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from obcbf.scenario import load_scenario
from obcbf.simulation import NoiseSource, NoiseSpec, monitor, noise_sample, run_scenario, step, summarize


@pytest.mark.parametrize("waveform", ["filtered", "multisine"])
@pytest.mark.parametrize("dim", [1, 3])
def test_noise_respects_bound(waveform, dim):
    src = NoiseSource(NoiseSpec(dim, 0.02, seed=3, waveform=waveform))
    V = np.array([src(t) for t in np.linspace(0.0, 500.0, 100_000)])
    assert np.linalg.norm(V, axis=1).max() <= 0.02
    assert np.linalg.norm(V, axis=1).max() > 0.005


def test_zero_noise_bound():
    src = NoiseSource(NoiseSpec(2, 0.0, seed=3))
    assert all(np.array_equal(src(t), np.zeros(2)) for t in np.linspace(0, 10, 50))


@given(st.integers(0, 1000), st.floats(0.0, 100.0))
def test_noise_deterministic(seed, t):
    spec = NoiseSpec(2, 0.05, seed=seed)
    assert np.array_equal(noise_sample(t, spec), NoiseSource(spec)(t))


def test_noise_seeds_differ():
    a = NoiseSource(NoiseSpec(1, 0.05, seed=1))
    b = NoiseSource(NoiseSpec(1, 0.05, seed=2))
    assert not np.allclose([a(t) for t in range(20)], [b(t) for t in range(20)])


def test_noise_validation():
    with pytest.raises(ValueError):
        NoiseSpec(1, -0.1)
    with pytest.raises(ValueError):
        NoiseSpec(1, 0.1, knot_dt=0.0)


def test_step_kinematics(case1):
    est = case1.estimator
    x, xhat, extra, path = step(case1.sys, est, np.zeros(2), np.zeros(2), est.extra_state(), [1.0], 0.0, 1.0, 8,
                                lambda t: np.zeros(1))
    assert np.allclose(x, [0.5, 1.0], atol=1e-14)
    assert np.allclose(xhat, x, atol=1e-14)      # zero error stays zero without noise
    assert path.shape == (9, 2) and np.array_equal(path[-1], x)


@pytest.fixture(scope="module")
def short_run():
    sc = load_scenario("double_integrator.toml", ["run.t_final=2.0"])
    log = run_scenario(sc)
    return sc, log


def test_short_run_log_shapes(short_run):
    sc, log = short_run
    assert log.steps == 100
    assert log.x.shape == log.xhat.shape == (100, 2) and log.u.shape == (100, 1)
    assert log.aborted is None and len(log.margins) == len(log.tightened) == 100
    assert all(v.passed for v in monitor(log, sc))


def test_monitor_catches_error_spike(short_run):
    sc, log = short_run
    bad = replace(log, e_norm=log.e_norm.copy())
    bad.e_norm[10] = 2.0 * log.delta_x[10]
    v = {x.name: x for x in monitor(bad, sc)}
    assert not v["error-bound"].passed and v["error-bound"].value == pytest.approx(2.0)


def test_monitor_catches_unsafe_state(short_run):
    sc, log = short_run
    bad = replace(log, h=log.h.copy())
    bad.h[5] = -0.01
    v = {x.name: x for x in monitor(bad, sc)}
    assert not v["safety"].passed
    bad = replace(log, u=log.u.copy())
    bad.u[3] = 2.5
    assert not {x.name: x for x in monitor(bad, sc)}["input-bounds"].passed


def test_monitor_catches_fallbacks(short_run):
    sc, log = short_run
    bad = replace(log, mode=list(log.mode))
    bad.mode[7] = "backup-fallback"
    assert not {x.name: x for x in monitor(bad, sc)}["fallbacks"].passed


def test_runs_are_deterministic(short_run):
    sc, log = short_run
    again = run_scenario(load_scenario("double_integrator.toml", ["run.t_final=2.0"]))
    assert np.array_equal(log.x, again.x) and np.array_equal(log.u, again.u)
    s1, s2 = summarize(log, sc, monitor(log, sc)), summarize(again, sc, monitor(again, sc))
    s1.pop("wall_time_s"), s2.pop("wall_time_s")
    assert s1 == s2


@pytest.mark.slow
@pytest.mark.parametrize("name", ["double_integrator.toml", "spacecraft.toml"])
def test_halving_control_period(name):
    a = load_scenario(name)
    b = load_scenario(name, [f"run.dt={a.dt / 2}"])
    la, lb = run_scenario(a), run_scenario(b)
    ha = min(la.h.min(), la.h_min_substep)
    hb = min(lb.h.min(), lb.h_min_substep)
    assert abs(ha - hb) < 1e-3
    assert all(v.passed for v in monitor(lb, b))


PERFECT = ["noise.vbar=0.0", "run.xhat0=[0.1, -0.1]", "run.t_final=5.0"]


def _min_h(log):
    return min(log.h.min(), log.h_min_substep)


@pytest.mark.slow
def test_perfect_state_baseline_safe():
    # the constraint is enforced on the tau grid only; 0.01 resolves the flow finely enough
    sc = load_scenario("double_integrator.toml", PERFECT + ["filter.mode=vanilla-bcbf", "filter.delta=0.01"])
    log = run_scenario(sc)
    assert np.array_equal(log.x, log.xhat)
    assert _min_h(log) >= -1e-9


@pytest.mark.slow
def test_baseline_grid_dip_shrinks_with_refinement():
    dips = [_min_h(run_scenario(load_scenario("double_integrator.toml", PERFECT + [
        "filter.mode=vanilla-bcbf", f"filter.delta={d}"])))
        for d in (0.04, 0.02, 0.01)]
    assert dips[0] < dips[1] < dips[2]


@pytest.mark.slow
def test_robust_filter_conservative_against_perfect_state_baseline():
    common = PERFECT + ["filter.delta=0.01"]
    ob = load_scenario("double_integrator.toml", common)
    lo = run_scenario(ob)
    lv = run_scenario(load_scenario("double_integrator.toml", common + ["filter.mode=vanilla-bcbf"]))
    f = ob.safety_filter
    eps = max(f.build(lo.xhat[k], lo.t[k], [0.0], ob.estimator.gain_at(lo.t[k]))[1].eps.max()
              for k in range(0, lo.steps, 10))
    assert _min_h(lo) >= _min_h(lv) - 1e-9
    assert _min_h(lo) - _min_h(lv) <= eps


@pytest.mark.slow
def test_noise_free_run_is_safe_and_bounded():
    sc = load_scenario("double_integrator.toml", ["noise.vbar=0.0", "run.t_final=10.0"])
    log = run_scenario(sc)
    v = {x.name: x for x in monitor(log, sc)}
    assert all(x.passed for x in v.values())
    noisy = run_scenario(load_scenario("double_integrator.toml", ["run.t_final=10.0"]))
    assert log.e_norm.max() <= noisy.delta_x.max()
    assert math.isfinite(log.h_min_substep)
