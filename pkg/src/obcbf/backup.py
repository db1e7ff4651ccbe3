"""Barriers, backup controllers, their certificates, and backup-flow propagation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import InputBox, SystemModel, closed_loop_field
from .linalg import IntegrationError, skew, skew_batch, spectral_norm, sym_sqrt_inv, symmetric_eigen_extrema


class CertificationError(ValueError):
    """A backup design fails one of its certifying inequalities."""


# ---------------------------------------------------------------------------
# barriers


@dataclass(frozen=True)
class Barrier:
    """Scalar barrier ``h`` whose 0-superlevel set is the set of interest.

    ``kind`` is one of ``"linear"``, ``"quadratic-centered"`` or ``"general"``.
    Quadratic-centered barriers are ``gamma - x^T P x`` with ``P`` positive
    semidefinite; linear barriers are ``a . x + b``. ``lipschitz_on(r)`` bounds
    ``||grad h||`` over the ball of radius ``r`` centred at the origin.
    """

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    lipschitz_on: Callable[[float], float]
    kind: str = "general"
    convex: bool = False
    P: Optional[np.ndarray] = None
    gamma: Optional[float] = None
    a: Optional[np.ndarray] = None
    name: str = "h"
    lam_max: Optional[float] = None     # largest eigenvalue of P, quadratic kind only

    def __call__(self, x) -> float:
        return self.value(x)


def quadratic_barrier(P, gamma: float, name: str = "h") -> Barrier:
    """``h(x) = gamma - x^T P x``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if np.abs(P - P.T).max() > 1e-12:
        raise ValueError("P must be symmetric")
    lam_min, lam_max = symmetric_eigen_extrema(P)
    if lam_min < -1e-12:
        raise ValueError("P must be positive semidefinite")
    gamma = float(gamma)
    P2 = 2.0 * P
    return Barrier(
        value=lambda x: gamma - float(x @ P @ x),
        gradient=lambda x: -(P2 @ x),
        lipschitz_on=lambda r: 2.0 * lam_max * r,
        kind="quadratic-centered",
        convex=False,
        P=P,
        gamma=gamma,
        name=name,
        lam_max=lam_max,
    )


def linear_barrier(a, b: float, name: str = "h") -> Barrier:
    """``h(x) = a . x + b``."""
    a = np.asarray(a, dtype=float).ravel()
    na = float(np.linalg.norm(a))
    return Barrier(
        value=lambda x: float(a @ x) + b,
        gradient=lambda x: a,
        lipschitz_on=lambda r: na,
        kind="linear",
        convex=True,
        a=a,
        gamma=float(b),
        name=name,
    )


def outside_ball_barrier(center, radius: float, name: str = "h") -> Barrier:
    """Convex obstacle barrier ``||x - c||^2 - r^2``."""
    c = np.asarray(center, dtype=float).ravel()
    r2 = float(radius) ** 2
    cn = float(np.linalg.norm(c))
    return Barrier(
        value=lambda x: float((x - c) @ (x - c)) - r2,
        gradient=lambda x: 2.0 * (x - c),
        lipschitz_on=lambda r: 2.0 * (r + cn),
        kind="general",
        convex=True,
        name=name,
    )


# ---------------------------------------------------------------------------
# backup policies


@dataclass(frozen=True)
class BackupPolicy:
    control: Callable[[np.ndarray], np.ndarray]
    control_jacobian: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    sup_norm: float
    name: str = "backup"
    params: dict = field(default_factory=dict, compare=False)
    jacobian_batch: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __call__(self, x) -> np.ndarray:
        return self.control(x)


def ball_samples(n: int, radius: float, density: int, seed: int = 0) -> np.ndarray:
    """Deterministic samples covering the closed ball: a regular grid clipped to
    the ball plus points on the bounding sphere."""
    axis = np.linspace(-radius, radius, density)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    inner = mesh[np.linalg.norm(mesh, axis=1) <= radius * (1 + 1e-12)]
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((density ** min(n, 2) * 4, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.vstack([inner, radius * d])


def estimate_sup(fn: Callable[[np.ndarray], float], n: int, radius: float,
                 density: int = 9, rel_tol: float = 0.01, max_doublings: int = 4) -> float:
    """Sup of ``fn`` over the ball by dense sampling, doubling the grid density
    until the estimate moves by less than ``rel_tol``."""
    prev = max(fn(x) for x in ball_samples(n, radius, density))
    for _ in range(max_doublings):
        density = 2 * density - 1
        cur = max(fn(x) for x in ball_samples(n, radius, density))
        if abs(cur - prev) <= rel_tol * max(abs(cur), 1e-300):
            return cur
        prev = cur
    return prev


def saturated_linear_policy(K, u_max: float, domain_radius: float, density: int = 9) -> BackupPolicy:
    """``u = u_max tanh(-K x / u_max)``: smooth saturation of ``-K x``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    u_max = float(u_max)

    def control(x):
        return u_max * np.tanh(-(K @ x) / u_max)

    def jac(x):
        s = np.tanh(-(K @ x) / u_max)
        return -(1.0 - s**2)[:, None] * K

    def jac_batch(X):
        s = np.tanh(-(X @ K.T) / u_max)
        return -(1.0 - s**2)[:, :, None] * K

    n = K.shape[1]
    lip = estimate_sup(lambda x: spectral_norm(jac(x)), n, domain_radius, density)
    ubar = estimate_sup(lambda x: float(np.linalg.norm(control(x))), n, domain_radius, density)
    return BackupPolicy(control, jac, lip, ubar, name="saturated_linear", params={"K": K, "u_max": u_max},
                        jacobian_batch=jac_batch)


def linear_policy(K, domain_radius: float) -> BackupPolicy:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    nK = spectral_norm(K)
    return BackupPolicy(lambda x: -(K @ x), lambda x: -K, nK, nK * domain_radius,
                        name="linear", params={"K": K},
                        jacobian_batch=lambda X: np.broadcast_to(-K, (X.shape[0],) + K.shape))


def spacecraft_policy(J, Kb: float, domain_radius: float, density: int = 9) -> BackupPolicy:
    """Feedback-linearizing rate damper ``u = -Kb J w + w x J w``."""
    J = np.asarray(J, dtype=float)
    Kb = float(Kb)

    def control(w):
        Jw = J @ w
        return -Kb * Jw + np.cross(w, Jw)

    def jac(w):
        return -Kb * J + skew(w) @ J - skew(J @ w)

    def jac_batch(W):
        return -Kb * J + skew_batch(W) @ J - skew_batch(W @ J.T)

    lip = estimate_sup(lambda w: spectral_norm(jac(w)), 3, domain_radius, density)
    ubar = estimate_sup(lambda w: float(np.linalg.norm(control(w))), 3, domain_radius, density)
    return BackupPolicy(control, jac, lip, ubar, name="spacecraft", params={"J": J, "Kb": Kb},
                        jacobian_batch=jac_batch)


def check_policy_in_box(policy: BackupPolicy, box: InputBox, samples: np.ndarray, tol: float = 1e-12) -> bool:
    return all(box.contains(policy(x), tol) for x in samples)


# ---------------------------------------------------------------------------
# flow propagation


@dataclass(frozen=True)
class FlowGrid:
    """Open-loop estimated backup flow and its sensitivity on ``tau = 0, D, ..., T``."""

    taus: np.ndarray
    states: np.ndarray          # (N+1, n)
    sensitivities: np.ndarray   # (N+1, n, n)

    @property
    def horizon(self) -> float:
        return float(self.taus[-1])

    @property
    def N(self) -> int:
        return self.taus.size - 1


def grid_size(T: float, delta: float) -> int:
    if delta <= 0:
        raise ValueError("grid spacing must be positive")
    N = int(round(T / delta))
    if abs(N * delta - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T/Delta must be an integer (T={T}, Delta={delta})")
    return N


def propagate_flow(sys: SystemModel, policy: BackupPolicy, xhat, T: float, delta: float,
                   substeps: int = 4) -> FlowGrid:
    """Integrate the backup flow and its sensitivity matrix as one augmented ODE."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    xhat = np.asarray(xhat, dtype=float).ravel()
    n = sys.n
    N = grid_size(T, delta)
    taus = np.linspace(0.0, N * delta, N + 1)
    if N == 0:
        return FlowGrid(taus, xhat[None, :].copy(), np.eye(n)[None])
    f_cl, F_batch = _closed_loop_parts(sys, policy)

    # RK4 on (x, Phi). The state stages never depend on Phi, so the state is
    # integrated first; the stage Jacobians are then evaluated in one batch and
    # each RK4 step on Phi collapses to Phi <- M_j Phi.
    h = delta / substeps
    half = 0.5 * h
    steps = N * substeps
    stages = np.empty((steps, 4, n))
    states = np.empty((N + 1, n))
    x = xhat.copy()
    states[0] = x
    j = 0
    for i in range(N):
        for _ in range(substeps):
            f1 = f_cl(x)
            s2 = x + half * f1
            f2 = f_cl(s2)
            s3 = x + half * f2
            f3 = f_cl(s3)
            s4 = x + h * f3
            f4 = f_cl(s4)
            stages[j, 0], stages[j, 1], stages[j, 2], stages[j, 3] = x, s2, s3, s4
            x = x + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
            j += 1
        if not np.all(np.isfinite(x)):
            raise IntegrationError(taus[i + 1], f"backup flow diverged at tau={taus[i + 1]:.4g}")
        states[i + 1] = x
    F = F_batch(stages.reshape(-1, n)).reshape(steps, 4, n, n)
    eye = np.eye(n)
    A2 = eye + half * F[:, 0]
    A3 = eye + half * (F[:, 1] @ A2)
    A4 = eye + h * (F[:, 2] @ A3)
    M = eye + (h / 6.0) * (F[:, 0] + 2.0 * (F[:, 1] @ A2) + 2.0 * (F[:, 2] @ A3) + F[:, 3] @ A4)
    sens = np.empty((N + 1, n, n))
    Phi = eye
    sens[0] = Phi
    j = 0
    for i in range(N):
        for _ in range(substeps):
            Phi = M[j] @ Phi
            j += 1
        sens[i + 1] = Phi
    if not np.all(np.isfinite(sens)):
        bad = int(np.argmax(~np.all(np.isfinite(sens.reshape(N + 1, -1)), axis=1)))
        raise IntegrationError(taus[bad], f"flow sensitivity diverged at tau={taus[bad]:.4g}")
    return FlowGrid(taus, states, sens)


def _closed_loop_parts(sys: SystemModel, policy: BackupPolicy):
    """Closed-loop field for single states and its Jacobian for a batch of states."""
    f_cl, F_cl = closed_loop_field(sys, policy.control, policy.control_jacobian)
    if sys.constant_input_map:
        g = sys.input_map(None)

        def fast_field(x):
            return sys.drift(x) + g @ policy.control(x)

        f_cl = fast_field

    batch_ok = (sys.constant_input_map and sys.drift_jacobian_batch is not None
                and policy.jacobian_batch is not None
                and not np.any(sys.input_map_directional_jacobian(np.zeros(sys.n), np.ones(sys.m))))
    if batch_ok:
        def F_batch(X):
            return sys.drift_jacobian_batch(X) + g @ policy.jacobian_batch(X)
    else:
        def F_batch(X):
            return np.array([F_cl(x) for x in X])
    return f_cl, F_batch


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class LinearGainCertificate:
    certified: bool
    Q: np.ndarray
    lambda_min_Q: float
    rhs: float
    rhs_conservative: float
    certified_conservative: bool
    diagnostic: str = ""

    @property
    def margin(self) -> float:
        return self.lambda_min_Q - self.rhs


def certify_linear_backup_gain(P, gamma: float, A, B, K, e_b: float) -> LinearGainCertificate:
    """Check that ``u = -K xhat`` keeps ``gamma - x^T P x >= 0`` invariant under
    estimation error at most ``e_b``; also evaluates the norm-product variant."""
    P = np.asarray(P, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lam_min_P, _ = symmetric_eigen_extrema(P)
    if lam_min_P <= 0:
        raise ValueError("P must be positive definite")
    Acl = A - B @ K
    Q = -(Acl.T @ P + P @ Acl)
    Q = 0.5 * (Q + Q.T)
    lam_min_Q, _ = symmetric_eigen_extrema(Q)
    scale = 2.0 * e_b * math.sqrt(lam_min_P / gamma)
    rhs = scale * spectral_norm(P @ B @ K)
    rhs_cons = scale * spectral_norm(P) * spectral_norm(B) * spectral_norm(K)
    if lam_min_Q <= 0:
        return LinearGainCertificate(False, Q, lam_min_Q, rhs, rhs_cons, False,
                                     f"Q is not positive definite (lambda_min={lam_min_Q:.4g})")
    ok = lam_min_Q >= rhs
    diag = "" if ok else f"lambda_min(Q)={lam_min_Q:.4g} < {rhs:.4g}"
    return LinearGainCertificate(ok, Q, lam_min_Q, rhs, rhs_cons, lam_min_Q >= rhs_cons, diag)


def no_saturation_margin_linear(K, P, gamma: float, e_b: float, u_max: float) -> float:
    """``u_max - (sqrt(gamma) ||K P^-1/2|| + ||K|| e_b)``; nonnegative means no saturation in the backup set."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    peak = math.sqrt(gamma) * spectral_norm(K @ sym_sqrt_inv(P)) + spectral_norm(K) * e_b
    return float(u_max) - peak


def certify_no_saturation_linear(K, P, gamma: float, e_b: float, u_max: float) -> bool:
    return no_saturation_margin_linear(K, P, gamma, e_b, u_max) >= 0.0


def spacecraft_gain_floor(J, gamma: float, e_b: float, omega_max: float) -> float:
    """Smallest rate-damping gain that keeps the energy backup set invariant
    under gyro-estimate error ``e_b``."""
    J = np.asarray(J, dtype=float)
    lam_min, lam_max = symmetric_eigen_extrema(J)
    coupling = lam_max * spectral_norm(J) * spectral_norm(np.linalg.inv(J)) * e_b
    denom = math.sqrt(2.0 * gamma * lam_min) - coupling
    if denom <= 0.0:
        raise CertificationError("backup set too small for this error bound")
    return 2.0 * coupling * omega_max / denom


def spacecraft_gain_ceiling(J, u_max: float, omega_max: float) -> float:
    """Largest rate-damping gain whose backup torque stays inside the input box on the safe set."""
    return float(u_max) / (spectral_norm(np.asarray(J, dtype=float)) * omega_max) - omega_max
