import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from obcbf.acceptance import sphere_sup, tightening_cases
from obcbf.backup import linear_barrier, outside_ball_barrier, quadratic_barrier, spacecraft_policy
from obcbf.bounds import (
    ClosedLoopFlowBound,
    GronwallFlowBound,
    LinearFlowBound,
    TighteningError,
    TighteningRule,
    flow_bound_closed_loop,
    flow_bound_general,
    flow_bound_linear,
    one_sided_lipschitz_estimate,
    quadratic_overapprox,
    quadratic_sup,
    tighten,
    tightening_rate,
)
from obcbf.dynamics import make_spacecraft
from obcbf.estimation import ErrorBoundProfile
from obcbf.linalg import finite_difference_jacobian

from conftest import J_INERTIA

A_DI = np.array([[0.0, 1.0], [0.0, 0.0]])


def const_profile(d):
    return ErrorBoundProfile(lambda t: d, d, d)


# --- closed-form tubes ---------------------------------------------------------

def test_general_bound_examples():
    assert flow_bound_general(0.1, 1.0, 0.0, 0.0, math.log(2.0)) == pytest.approx(0.2)
    assert flow_bound_general(0.1, 0.5, 0.25, 2.0, 1.0) == pytest.approx(0.1 * math.e)
    assert flow_bound_general(0.3, 2.0, 1.0, 1.0, 0.0) == 0.3
    with pytest.raises(ValueError):
        flow_bound_general(0.1, -1.0, 0.0, 0.0, 1.0)


def test_linear_bound_examples():
    assert flow_bound_linear(1.0, A_DI, 1.0) == pytest.approx((1 + math.sqrt(5)) / 2, abs=1e-9)
    assert flow_bound_linear(0.2, -np.eye(3), 2.0) == pytest.approx(0.2 * math.exp(-2.0))
    assert flow_bound_linear(0.2, A_DI, 0.0) == pytest.approx(0.2)


def test_flow_bound_objects_match_functions():
    taus = np.linspace(0.0, 2.0, 11)
    g = GronwallFlowBound(const_profile(0.1), 0.5, 0.2, 3.0)
    assert np.allclose(g.grid(taus, 0.0), [flow_bound_general(0.1, 0.5, 0.2, 3.0, s) for s in taus])
    lb = LinearFlowBound(const_profile(0.1), A_DI)
    assert np.allclose(lb.grid(taus, 0.0), [flow_bound_linear(0.1, A_DI, s) for s in taus])
    assert lb.evaluate(1.0, 5.0) == pytest.approx(0.1 * (1 + math.sqrt(5)) / 2, abs=1e-9)


def test_closed_loop_grid_matches_pointwise():
    prof = ErrorBoundProfile(lambda t: 0.1 * math.exp(-t) + 0.02, 0.12, 0.12)
    cl = ClosedLoopFlowBound(prof, -0.3, 1.5, 1.0, 0.01, quad_step=1e-3)
    taus = np.linspace(0.0, 3.0, 31)
    ref = [flow_bound_closed_loop(prof, 0.4, s, -0.3, 1.5, 1.0, 0.01, 1e-3) for s in taus]
    assert np.allclose(cl.grid(taus, 0.4), ref, rtol=1e-6, atol=1e-12)


def test_closed_loop_bound_limits():
    d, k, Lb, Lz, v = 0.05, -0.5, 2.0, 1.0, 0.01
    far = flow_bound_closed_loop(lambda t: d, 0.0, 60.0, k, Lb, Lz, v, step=1e-3)
    assert far == pytest.approx(d + (Lb * v + Lb * Lz * d) / (-k), rel=1e-6)
    assert flow_bound_closed_loop(lambda t: d, 0.0, 0.0, k, Lb, Lz, v) == d


def test_closed_loop_bound_continuous_in_kappa():
    f = lambda k: flow_bound_closed_loop(lambda t: 0.05, 0.0, 2.0, k, 2.0, 1.0, 0.01, step=1e-3)
    assert f(1e-9) == pytest.approx(f(0.0), rel=1e-7)
    assert f(-1e-9) == pytest.approx(f(0.0), rel=1e-7)
    assert f(0.0) == pytest.approx(0.05 + 2.0 * 0.01 * 2.0 + 2.0 * 0.05 * 2.0, rel=1e-9)


# --- one-sided Lipschitz -----------------------------------------------------------

def test_osl_examples(rng):
    samples = rng.normal(size=(20, 3))
    assert one_sided_lipschitz_estimate(lambda x: -0.7 * np.eye(3), samples) == pytest.approx(-0.7)
    S = np.array([[0.0, 1.0, -2.0], [-1.0, 0.0, 0.5], [2.0, -0.5, 0.0]])
    assert one_sided_lipschitz_estimate(lambda x: S, samples) == pytest.approx(0.0, abs=1e-12)


def test_osl_spacecraft_backup_loop(rng):
    sys = make_spacecraft(J_INERTIA)
    pol = spacecraft_policy(J_INERTIA, 0.2746, 0.15, density=3)
    F = lambda w: finite_difference_jacobian(lambda v: sys.dynamics(v, pol(v)), w)
    assert one_sided_lipschitz_estimate(F, rng.uniform(-0.1, 0.1, (30, 3))) == pytest.approx(-0.2746, abs=1e-6)


# --- tightening ------------------------------------------------------------------

def test_tighten_examples():
    bar = quadratic_barrier(np.eye(2), 1.0)
    assert tighten(TighteningRule("quadratic"), bar, [1.0, 0.0], 0.1) == pytest.approx(0.21)
    assert tighten(TighteningRule("quadratic", exact=True), bar, [1.0, 0.0], 0.1) == pytest.approx(0.21)
    assert tighten(TighteningRule("exact-linear"), linear_barrier([3.0, 4.0], 0.0), [9.0, 9.0], 0.1) == pytest.approx(0.5)
    for label, rule, b in tightening_cases():
        assert tighten(rule, b, np.ones(b.P.shape[0] if b.P is not None else 3 if b.a is not None else 2), 0.0) == 0.0


def test_tighten_rejects_mismatch():
    quad = quadratic_barrier(np.eye(2), 1.0)
    with pytest.raises(TighteningError):
        tighten(TighteningRule("exact-linear"), quad, [0.0, 0.0], 0.1)
    with pytest.raises(TighteningError):
        tighten(TighteningRule("convex-gradient"), quad, [0.0, 0.0], 0.1)
    with pytest.raises(TighteningError):
        tighten(TighteningRule("quadratic"), linear_barrier([1.0, 0.0], 0.0), [0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        tighten(TighteningRule("quadratic"), quad, [0.0, 0.0], -0.1)
    with pytest.raises(ValueError):
        TighteningRule("cubic")


@given(arrays(np.float64, 2, elements=st.floats(-2.0, 2.0)), st.floats(0.0, 1.0))
def test_tightening_ordering(p, delta):
    bar = quadratic_barrier(np.array([[2.1, 0.4], [0.4, 0.9]]), 1.0)
    exact = tighten(TighteningRule("quadratic", exact=True), bar, p, delta)
    over = tighten(TighteningRule("quadratic"), bar, p, delta)
    lip = tighten(TighteningRule("lipschitz"), bar, p, delta)
    assert exact <= over * (1 + 1e-12) + 1e-15
    assert over <= lip * (1 + 1e-12) + 1e-15


def test_convex_gradient_equals_exact_for_linear():
    lin = linear_barrier([0.3, -1.2, 0.5], 0.7)
    p = np.array([0.2, 0.1, -0.4])
    assert tighten(TighteningRule("convex-gradient"), lin, p, 0.3) == pytest.approx(
        tighten(TighteningRule("exact-linear"), lin, p, 0.3))


CASES = tightening_cases()


@pytest.mark.parametrize("label,rule,bar", CASES, ids=[c[0] for c in CASES])
@given(data=st.data())
def test_tightening_sound_on_samples(label, rule, bar, data):
    n = bar.P.shape[0] if bar.P is not None else bar.a.size if bar.a is not None else 2
    p = np.array(data.draw(st.lists(st.floats(-1.5, 1.5), min_size=n, max_size=n)))
    delta = data.draw(st.floats(0.0, 0.5))
    d = np.array(data.draw(st.lists(st.floats(-1.0, 1.0), min_size=n, max_size=n)))
    nd = np.linalg.norm(d)
    if nd > 1.0:
        d /= nd
    d *= delta
    eps = tighten(rule, bar, p, delta)
    assert bar(p) - bar(p + d) <= eps + 1e-12 * (1 + abs(bar(p)))


def _quad_gain(P, phi):
    return lambda D: np.einsum("ij,jk,ik->i", D, P, D) + 2.0 * D @ (P @ phi)


@given(arrays(np.float64, (2, 2), elements=st.floats(-1.0, 1.0)),
       arrays(np.float64, 2, elements=st.floats(-2.0, 2.0)), st.floats(0.01, 1.0))
def test_quadratic_sup_matches_brute_force(M, phi, r):
    P = M @ M.T
    ref = sphere_sup(_quad_gain(P, phi), 2, r)
    assert quadratic_sup(P, phi, r) == pytest.approx(ref, abs=1e-9 * max(1.0, abs(ref)))
    assert quadratic_sup(P, phi, r) <= quadratic_overapprox(P, phi, r) * (1 + 1e-12) + 1e-15


@pytest.mark.parametrize("P,phi,r", [
    (np.diag([2.0, 1.0]), np.array([0.0, 0.05]), 0.5),     # hard case
    (np.diag([2.0, 1.0]), np.array([0.0, 3.0]), 0.5),      # near-hard, secular root exists
    (np.diag([1.0, 0.0]), np.array([0.0, 7.0]), 0.3),      # PSD, component only in the null space
    (np.diag([1.0, 1.0]), np.array([0.0, 0.0]), 0.4),      # zero linear term
])
def test_quadratic_sup_degenerate_cases(P, phi, r):
    ref = sphere_sup(_quad_gain(P, phi), 2, r)
    assert quadratic_sup(P, phi, r) == pytest.approx(ref, abs=1e-10)


def test_quadratic_sup_three_dimensional():
    P = 0.5 * J_INERTIA
    phi = np.array([0.03, -0.01, 0.02])
    assert quadratic_sup(P, phi, 0.01) == pytest.approx(sphere_sup(_quad_gain(P, phi), 3, 0.01), rel=1e-9)


# --- tightening rate ---------------------------------------------------------------

def test_tightening_rate_lipschitz_decay():
    lin = linear_barrier([3.0, 4.0], 0.0)
    rule = TighteningRule("lipschitz", lipschitz_radius=10.0)
    prof = lambda t: 0.2 * math.exp(-t)
    assert tightening_rate(rule, lin, [1.0, 1.0], prof, 0.0) == pytest.approx(-5.0 * 0.2, rel=1e-6)
    assert tightening_rate(rule, lin, [1.0, 1.0], prof, 1.0) == pytest.approx(-5.0 * 0.2 * math.exp(-1.0), rel=1e-6)
    assert tightening_rate(rule, lin, [1.0, 1.0], prof, 1.0, zeroed=True) == 0.0


def test_tightening_rate_constant_profile_is_zero():
    bar = outside_ball_barrier([0.5, -0.2], 0.4)
    assert tightening_rate(TighteningRule("convex-gradient"), bar, [1.0, 1.0], lambda t: 0.1, 2.0) == 0.0
