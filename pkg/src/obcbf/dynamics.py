"""Control-affine system models ``xdot = f(x) + g(x) u`` with measured output ``y = z(x) + v``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import finite_difference_jacobian, skew, skew_batch, spectral_norm, symmetric_eigen_extrema

Vec = np.ndarray
Mat = np.ndarray


@dataclass(frozen=True)
class InputBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("input box bounds have mismatched shapes")
        if np.any(lo > hi):
            raise ValueError("input box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, u_max: float, m: int = 1) -> "InputBox":
        return cls(-u_max * np.ones(m), u_max * np.ones(m))

    @property
    def m(self) -> int:
        return self.lower.size

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)


@dataclass(frozen=True)
class SystemModel:
    """Dynamics, analytic Jacobians and measurement model of one plant.

    ``input_map_directional_jacobian(x, u)`` is d(g(x) u)/dx for a fixed ``u``.
    ``measure_jacobian`` is used by the extended Kalman filter.
    """

    name: str
    n: int
    m: int
    y_dim: int
    drift: Callable[[Vec], Vec]
    input_map: Callable[[Vec], Mat]
    drift_jacobian: Callable[[Vec], Mat]
    input_map_directional_jacobian: Callable[[Vec, Vec], Mat]
    measure: Callable[[Vec], Vec]
    measure_jacobian: Callable[[Vec], Mat]
    measure_lipschitz: float
    constant_input_map: bool = False
    params: dict = field(default_factory=dict, compare=False)
    drift_jacobian_batch: Optional[Callable[[Mat], np.ndarray]] = field(default=None, compare=False)

    def dynamics(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_map(x) @ np.atleast_1d(u)

    def dynamics_jacobian(self, x, u) -> np.ndarray:
        return self.drift_jacobian(x) + self.input_map_directional_jacobian(x, np.atleast_1d(u))


@dataclass(frozen=True)
class LinearSystemSpec:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if observability_rank(A, C) < n:
            raise ValueError("(A, C) is not observable")

    @property
    def n(self) -> int:
        return self.A.shape[0]


def observability_rank(A, C) -> int:
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    return int(np.linalg.matrix_rank(np.vstack(blocks)))


def make_linear(spec: LinearSystemSpec, name: str = "linear") -> SystemModel:
    A, B, C = spec.A, spec.B, spec.C
    n, m = B.shape
    zeros = np.zeros((n, n))
    return SystemModel(
        name=name,
        n=n,
        m=m,
        y_dim=C.shape[0],
        drift=lambda x: A @ x,
        input_map=lambda x: B,
        drift_jacobian=lambda x: A,
        input_map_directional_jacobian=lambda x, u: zeros,
        measure=lambda x: C @ x,
        measure_jacobian=lambda x: C,
        measure_lipschitz=spectral_norm(C),
        constant_input_map=True,
        params={"A": A, "B": B, "C": C},
        drift_jacobian_batch=lambda X: np.broadcast_to(A, (X.shape[0], n, n)),
    )


def double_integrator_spec() -> LinearSystemSpec:
    return LinearSystemSpec(A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], C=[[1.0, 0.0]])


def make_double_integrator() -> SystemModel:
    """Double integrator with position measurement."""
    return make_linear(double_integrator_spec(), name="double_integrator")


def make_spacecraft(J) -> SystemModel:
    """Rigid-body rotation (Euler's equations) with a full gyro measurement."""
    J = np.asarray(J, dtype=float)
    if J.shape != (3, 3):
        raise ValueError("inertia must be 3x3")
    if np.abs(J - J.T).max() > 1e-12:
        raise ValueError("inertia must be symmetric")
    lam_min, _ = symmetric_eigen_extrema(J)
    if lam_min <= 0.0:
        raise ValueError("inertia must be positive definite")
    Jinv = np.linalg.inv(J)
    I3 = np.eye(3)
    zeros = np.zeros((3, 3))

    def drift(w):
        return Jinv @ (-np.cross(w, J @ w))

    def drift_jacobian(w):
        return Jinv @ (-skew(w) @ J + skew(J @ w))

    return SystemModel(
        name="spacecraft",
        n=3,
        m=3,
        y_dim=3,
        drift=drift,
        input_map=lambda w: Jinv,
        drift_jacobian=drift_jacobian,
        input_map_directional_jacobian=lambda w, u: zeros,
        measure=lambda w: np.array(w, dtype=float),
        measure_jacobian=lambda w: I3,
        measure_lipschitz=1.0,
        constant_input_map=True,
        params={"J": J, "Jinv": Jinv},
        drift_jacobian_batch=lambda W: Jinv @ (-skew_batch(W) @ J + skew_batch(W @ J.T)),
    )


def closed_loop_field(
    sys: SystemModel,
    controller: Callable[[Vec], Vec],
    controller_jacobian: Optional[Callable[[Vec], Mat]] = None,
    fd_step: float = 1e-6,
):
    """Closed-loop field ``f(x) + g(x) k(x)`` and its Jacobian.

    Without an analytic controller Jacobian a central-difference fallback is used.
    """
    if controller_jacobian is None:
        def controller_jacobian(x):
            return finite_difference_jacobian(controller, x, fd_step)

    def field_fn(x):
        return sys.drift(x) + sys.input_map(x) @ controller(x)

    def jacobian_fn(x):
        u = controller(x)
        return (
            sys.drift_jacobian(x)
            + sys.input_map_directional_jacobian(x, u)
            + sys.input_map(x) @ controller_jacobian(x)
        )

    return field_fn, jacobian_fn
