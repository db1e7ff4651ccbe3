import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from obcbf.dynamics import LinearSystemSpec, double_integrator_spec, make_linear, make_spacecraft
from obcbf.estimation import (
    ErrorBoundProfile,
    EstimatorError,
    LinearErrorBound,
    RiccatiState,
    constant_gain_observer,
    ekf_estimator,
    error_bound_exponential,
    error_bound_linear,
)
from obcbf.linalg import matrix_exponential, rk4_integrate, spectral_norm
from obcbf.simulation import step

from conftest import J_INERTIA

LAM_DI = np.array([[-2.0, 1.0], [-2.0, 0.0]])


def test_consistent_measurement_gives_zero_correction():
    obs = constant_gain_observer(double_integrator_spec(), [[2.0], [2.0]])
    xhat = np.array([0.4, -0.2])
    assert np.array_equal(obs.correction(0.0, xhat, xhat[:1]), np.zeros(2))


def test_case_one_gain_accepted_with_expected_error_dynamics():
    obs = constant_gain_observer(double_integrator_spec(), [[2.0], [2.0]])
    assert np.array_equal(obs.error_matrix, LAM_DI)
    assert np.allclose(np.sort_complex(np.linalg.eigvals(obs.error_matrix)), [-1 - 1j, -1 + 1j])
    assert obs.gain_norm_bound == pytest.approx(2 * math.sqrt(2))


def test_non_hurwitz_observer_rejected():
    with pytest.raises(EstimatorError):
        constant_gain_observer(LinearSystemSpec([[0.0]], [[1.0]], [[1.0]]), [[0.0]])


def _scalar_ekf(sigma0, w, r):
    sys = make_linear(LinearSystemSpec([[0.0]], [[1.0]], [[1.0]]))
    return ekf_estimator(sys, RiccatiState([[sigma0]], [[w]], [[r]]))


def _riccati_path(ekf, t_end, steps):
    def field(t, s):
        _, sdot = ekf.rates(t, np.zeros(1), s, np.zeros(1), np.zeros(1))
        return sdot

    return rk4_integrate(field, ekf.extra_state(), (0.0, t_end), steps)


def test_scalar_riccati_without_process_noise():
    ekf = _scalar_ekf(1.0, 0.0, 1.0)
    path = _riccati_path(ekf, 3.0, 300)
    t = np.linspace(0.0, 3.0, 301)
    assert np.allclose(path[:, 0], 1.0 / (1.0 + t), atol=1e-8)


def test_scalar_riccati_steady_state():
    w, r = 0.04, 0.25
    ekf = _scalar_ekf(1.0, w, r)
    assert _riccati_path(ekf, 40.0, 4000)[-1, 0] == pytest.approx(math.sqrt(w * r), rel=1e-8)


def test_riccati_state_validation():
    with pytest.raises(ValueError):
        RiccatiState([[1.0, 0.2], [0.0, 1.0]], np.eye(2), [[1.0]])
    with pytest.raises(ValueError):
        RiccatiState(np.eye(2), -np.eye(2), [[1.0]])
    with pytest.raises(ValueError):
        RiccatiState(np.eye(2), np.eye(2), [[0.0]])
    RiccatiState(np.eye(2), np.zeros((2, 2)), [[1.0]])


def test_ekf_covariance_stays_symmetric_and_positive():
    sys = make_spacecraft(J_INERTIA)
    ekf = ekf_estimator(sys, RiccatiState(1e-4 * np.eye(3), 1.6e-5 * np.eye(3), 1e-4 * np.eye(3)))
    x, xhat, extra = np.array([0.05, -0.03, 0.02]), np.array([0.04, -0.02, 0.02]), ekf.extra_state()
    noise = lambda t: 0.005 * np.array([math.sin(7 * t), math.cos(5 * t), 0.0])
    for k in range(100):
        x, xhat, extra, _ = step(sys, ekf, x, xhat, extra, np.array([0.01, 0.0, -0.01]), 0.05 * k, 0.05, 4, noise)
        S = extra.reshape(3, 3)
        assert np.abs(S - S.T).max() <= 1e-10
        ekf.set_extra_state(extra, xhat)
        assert ekf.check_covariance(0.05 * k) > 0.0
    assert spectral_norm(ekf.gain_at()) <= ekf.gain_norm_bound


def test_ekf_check_covariance_detects_loss_of_definiteness():
    ekf = _scalar_ekf(1.0, 0.0, 1.0)
    ekf.set_extra_state(np.array([-1.0]))
    with pytest.raises(EstimatorError):
        ekf.check_covariance(0.0)


def test_linear_bound_at_zero_is_initial_bound():
    assert error_bound_linear(0.0, 0.2, LAM_DI, [[2.0], [2.0]], 0.02) == pytest.approx(0.2)


def test_linear_bound_scalar_closed_form():
    ln2 = math.log(2.0)
    assert error_bound_linear(ln2, 0.2, [[-1.0]], [[1.0]], 0.02) == pytest.approx(0.11, abs=1e-10)
    for t in (0.0, 0.013, 0.5, 1.7, 6.0):
        exact = 0.2 * math.exp(-t) + 0.02 * (1 - math.exp(-t))
        assert error_bound_linear(t, 0.2, [[-1.0]], [[1.0]], 0.02) == pytest.approx(exact, abs=1e-10)


def test_linear_bound_without_noise_decays():
    b = LinearErrorBound([[-0.5]], [[1.0]], 0.2, 0.0)
    vals = [b(t) for t in np.linspace(0.0, 30.0, 301)]
    assert np.all(np.diff(vals) <= 0)
    di = LinearErrorBound(LAM_DI, [[2.0], [2.0]], 0.2, 0.0)
    assert di(0.0) == pytest.approx(0.2)
    assert di(40.0) < 1e-12
    for t in (0.3, 1.1, 4.0):
        assert di(t) == pytest.approx(0.2 * spectral_norm(matrix_exponential(LAM_DI, t)))


def test_linear_bound_matches_fine_quadrature():
    b = LinearErrorBound(LAM_DI, [[2.0], [2.0]], 0.2, 0.02)
    s = np.linspace(0.0, 3.3, 33001)
    g = np.array([spectral_norm(matrix_exponential(LAM_DI, si) @ np.array([[2.0], [2.0]])) for si in s])
    integral = float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(s)))
    expected = 0.2 * spectral_norm(matrix_exponential(LAM_DI, 3.3)) + 0.02 * integral
    assert b(3.3) == pytest.approx(expected, abs=1e-8)


@given(st.floats(0.0, 20.0))
def test_linear_bound_is_continuous(t):
    b = error_bound_linear
    args = (0.2, LAM_DI, [[2.0], [2.0]], 0.02)
    h = 1e-3
    # Lipschitz in t with constant ||Lam|| e0 + vbar ||L|| (coarse, finite)
    C = spectral_norm(LAM_DI) * 0.2 * 3 + 0.02 * 2 * math.sqrt(2) * 3
    assert abs(b(t + h, *args) - b(t, *args)) <= C * h


def test_linear_bound_rejects_unstable_error_dynamics():
    with pytest.raises(EstimatorError):
        LinearErrorBound([[0.1]], [[1.0]], 0.2, 0.0)
    with pytest.raises(ValueError):
        LinearErrorBound([[-1.0]], [[1.0]], 0.2, -1.0)


def test_exponential_bound():
    assert error_bound_exponential(0.0, 0.02, 0.017, 0.2) == pytest.approx(0.02)
    assert error_bound_exponential(1e4, 0.02, 0.017, 0.2) == pytest.approx(0.003)
    assert error_bound_exponential(3.0, 0.02, 0.0, 0.2) == 0.02
    with pytest.raises(ValueError):
        error_bound_exponential(0.0, 0.02, 0.03, 0.2)
    with pytest.raises(ValueError):
        error_bound_exponential(0.0, 0.02, 0.01, 0.0)


def test_profile_is_callable():
    p = ErrorBoundProfile(lambda t: 2.0 * t, 0.1, 0.05)
    assert p(3.0) == 6.0 and p.initial_bound == 0.1 and p.backup_region_bound == 0.05


def test_consistent_observer_keeps_zero_error():
    spec = double_integrator_spec()
    sys = make_linear(spec)
    obs = constant_gain_observer(spec, [[2.0], [2.0]], sys)
    x = xhat = np.array([0.3, -0.7])
    extra = obs.extra_state()
    for k in range(200):
        u = np.array([math.sin(0.1 * k)])
        x, xhat, extra, _ = step(sys, obs, x, xhat, extra, u, 0.02 * k, 0.02, 4, lambda t: np.zeros(1))
        assert np.linalg.norm(x - xhat) <= 1e-9
