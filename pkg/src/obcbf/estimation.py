"""Error-bounded state estimators and their estimation-error bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .dynamics import LinearSystemSpec, SystemModel, make_linear
from .linalg import is_hurwitz, matrix_exponential, spectral_norm, symmetric_eigen_extrema


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ErrorBoundProfile:
    """Time-indexed bound on the estimation-error norm.

    ``delta_x(t)`` bounds ``||x(t) - xhat(t)||`` for runs whose initial error is
    at most ``initial_bound``; ``backup_region_bound`` is the error bound assumed
    while the true state is in the backup set.
    """

    delta_x: Callable[[float], float]
    initial_bound: float
    backup_region_bound: float

    def __call__(self, t: float) -> float:
        return self.delta_x(t)


@dataclass
class RiccatiState:
    sigma: np.ndarray
    W: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name in ("sigma", "W", "R"):
            M = getattr(self, name)
            if np.abs(M - M.T).max() > 1e-12:
                raise ValueError(f"{name} must be symmetric")
            lam_min = symmetric_eigen_extrema(M)[0]
            if name == "W" and lam_min < 0.0:
                raise ValueError("W must be positive semidefinite")
            if name != "W" and lam_min <= 0.0:
                raise ValueError(f"{name} must be positive definite")


class LinearCorrectionObserver:
    """Observer ``xhat' = f(xhat) + g(xhat) u + L (y - z(xhat))`` with constant ``L``."""

    n_extra = 0

    def __init__(self, sys: SystemModel, L):
        self.sys = sys
        self.L = np.asarray(L, dtype=float).reshape(sys.n, sys.y_dim)
        self.gain_norm_bound = spectral_norm(self.L)

    def correction(self, t, xhat, y):
        return self.L @ (np.atleast_1d(y) - self.sys.measure(xhat))

    def gain_at(self, t=None):
        return self.L

    def extra_state(self):
        return np.zeros(0)

    def set_extra_state(self, extra):
        pass

    def gain_from_extra(self, extra):
        return self.L

    def rates(self, t, xhat, extra, y, u):
        xdot = self.sys.dynamics(xhat, u) + self.correction(t, xhat, y)
        return xdot, extra


def constant_gain_observer(spec: LinearSystemSpec, L, sys: Optional[SystemModel] = None) -> LinearCorrectionObserver:
    """Constant-gain observer; rejects gains for which ``A - L C`` is not Hurwitz."""
    L = np.asarray(L, dtype=float).reshape(spec.n, spec.C.shape[0])
    Lam = spec.A - L @ spec.C
    ok, eig = is_hurwitz(Lam)
    if not ok:
        raise EstimatorError(f"A - L C is not Hurwitz; eigenvalues {np.round(eig, 6).tolist()}")
    obs = LinearCorrectionObserver(sys if sys is not None else make_linear(spec), L)
    obs.error_matrix = Lam
    return obs


class ExtendedKalmanFilter:
    """Continuous-time EKF; the gain ``Sigma C^T R^-1`` follows a Riccati ODE.

    The covariance is owned by this object and advanced by the simulator
    together with the estimate.
    """

    def __init__(self, sys: SystemModel, riccati: RiccatiState, gain_norm_bound: Optional[float] = None):
        n = sys.n
        if riccati.sigma.shape != (n, n) or riccati.W.shape != (n, n):
            raise ValueError("Riccati matrices do not match the state dimension")
        if riccati.R.shape != (sys.y_dim, sys.y_dim):
            raise ValueError("R does not match the output dimension")
        self.sys = sys
        self.W = riccati.W
        self.R = riccati.R
        self.Rinv = np.linalg.inv(riccati.R)
        self.sigma = riccati.sigma.copy()
        self.n_extra = n * n
        self._xhat = np.zeros(n)
        if gain_norm_bound is None:
            C = sys.measure_jacobian(np.zeros(n))
            gain_norm_bound = spectral_norm(self.sigma) * spectral_norm(C) * spectral_norm(self.Rinv)
        self.gain_norm_bound = float(gain_norm_bound)

    def _gain(self, sigma, xhat):
        C = self.sys.measure_jacobian(xhat)
        return sigma @ C.T @ self.Rinv

    def gain_at(self, t=None):
        return self._gain(self.sigma, self._xhat)

    def correction(self, t, xhat, y):
        return self._gain(self.sigma, xhat) @ (np.atleast_1d(y) - self.sys.measure(xhat))

    def extra_state(self):
        return self.sigma.ravel().copy()

    def set_extra_state(self, extra, xhat=None):
        S = np.asarray(extra, dtype=float).reshape(self.sys.n, self.sys.n)
        self.sigma = 0.5 * (S + S.T)
        if xhat is not None:
            self._xhat = np.asarray(xhat, dtype=float)

    def gain_from_extra(self, extra, xhat):
        return self._gain(np.asarray(extra).reshape(self.sys.n, self.sys.n), xhat)

    def rates(self, t, xhat, extra, y, u):
        n = self.sys.n
        S = extra.reshape(n, n)
        C = self.sys.measure_jacobian(xhat)
        L = S @ C.T @ self.Rinv
        xdot = self.sys.dynamics(xhat, u) + L @ (np.atleast_1d(y) - self.sys.measure(xhat))
        F = self.sys.dynamics_jacobian(xhat, u)
        Sdot = F @ S + S @ F.T + self.W - L @ C @ S
        return xdot, Sdot.ravel()

    def check_covariance(self, t):
        S = self.sigma
        asym = np.abs(S - S.T).max()
        lam_min = np.linalg.eigvalsh(S).min()
        if lam_min <= 0.0 or asym > 1e-10 * max(1.0, np.abs(S).max()):
            raise EstimatorError(
                f"Riccati solution lost positive definiteness at t={t:.4f} "
                f"(lambda_min={lam_min:.3e}, asymmetry={asym:.3e})"
            )
        return lam_min


def ekf_estimator(sys: SystemModel, riccati: RiccatiState, gain_norm_bound: Optional[float] = None) -> ExtendedKalmanFilter:
    return ExtendedKalmanFilter(sys, riccati, gain_norm_bound)


class LinearErrorBound:
    """Estimation-error bound of a constant-gain linear observer.

    ``delta(t) = e0 ||exp(Lam t)|| + vbar * int_0^t ||exp(Lam s) L|| ds``

    The integral is accumulated with Simpson's rule on a grid of width
    ``step`` (each cell split at its midpoint); the cumulative values are
    cached and extended lazily, so repeated evaluation is O(1) amortized.
    """

    def __init__(self, Lam, L, e0: float, vbar: float, step: float = 0.01):
        self.Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
        self.L = np.asarray(L, dtype=float).reshape(self.Lam.shape[0], -1)
        ok, eig = is_hurwitz(self.Lam)
        if not ok:
            raise EstimatorError(f"error dynamics are not Hurwitz; eigenvalues {eig}")
        if vbar < 0:
            raise ValueError("noise bound must be nonnegative")
        self.e0 = float(e0)
        self.vbar = float(vbar)
        self.step = float(step)
        self._half = matrix_exponential(self.Lam, 0.5 * self.step)
        self._E = np.eye(self.Lam.shape[0])  # exp(Lam * k * step) at the last cached node
        self._cum = [0.0]
        self._g_last = spectral_norm(self.L)
        self._memo: dict[float, float] = {}

    def _integrand(self, s: float) -> float:
        return spectral_norm(matrix_exponential(self.Lam, s) @ self.L)

    def _extend(self, k: int):
        while len(self._cum) <= k:
            Emid = self._E @ self._half
            Enext = Emid @ self._half
            g_mid = spectral_norm(Emid @ self.L)
            g_next = spectral_norm(Enext @ self.L)
            self._cum.append(self._cum[-1] + self.step / 6.0 * (self._g_last + 4.0 * g_mid + g_next))
            self._E = Enext
            self._g_last = g_next

    def noise_integral(self, t: float) -> float:
        if t <= 0.0:
            return 0.0
        k = int(math.floor(t / self.step + 1e-12))
        self._extend(k)
        tk = k * self.step
        rem = t - tk
        total = self._cum[k]
        if rem > 1e-15:
            g0 = self._integrand(tk)
            gm = self._integrand(tk + 0.5 * rem)
            g1 = self._integrand(t)
            total += rem / 6.0 * (g0 + 4.0 * gm + g1)
        return total

    def __call__(self, t: float) -> float:
        t = max(float(t), 0.0)
        v = self._memo.get(t)
        if v is None:
            v = self.e0 * spectral_norm(matrix_exponential(self.Lam, t)) + self.vbar * self.noise_integral(t)
            if len(self._memo) > 4096:
                self._memo.clear()
            self._memo[t] = v
        return v


@lru_cache(maxsize=32)
def _cached_linear_bound(lam_key, l_key, shape_lam, shape_l, e0, vbar):
    Lam = np.frombuffer(lam_key).reshape(shape_lam)
    L = np.frombuffer(l_key).reshape(shape_l)
    return LinearErrorBound(Lam, L, e0, vbar)


def error_bound_linear(t: float, e0: float, Lam, L, vbar: float) -> float:
    """Bound on ``||x - xhat||`` for a constant-gain observer with ``||v|| <= vbar``."""
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    L = np.asarray(L, dtype=float).reshape(Lam.shape[0], -1)
    bound = _cached_linear_bound(Lam.tobytes(), L.tobytes(), Lam.shape, L.shape, float(e0), float(vbar))
    return bound(t)


def error_bound_exponential(t: float, e0: float, beta: float, kappa: float) -> float:
    """Assumed exponentially decaying bound ``e0 - beta (1 - exp(-kappa t))``."""
    if not (0.0 <= beta < e0) or kappa <= 0.0:
        raise ValueError("need 0 <= beta < e0 and kappa > 0")
    return e0 - beta * (1.0 - math.exp(-kappa * max(t, 0.0)))
