"""Small dense numerical kernels.

Everything here operates on tiny matrices (n <= ~20) and favours determinism
and testability over raw speed. Norms are Euclidean for vectors and spectral
(largest singular value) for matrices throughout the package.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when a vector field returns a non-finite value."""

    def __init__(self, tau: float, message: str = ""):
        self.tau = float(tau)
        super().__init__(message or f"non-finite vector field evaluation at tau={tau:.6g}")


def rk4_integrate(
    field: Callable[[float, np.ndarray], np.ndarray],
    x0,
    span: tuple[float, float],
    steps: int,
) -> np.ndarray:
    """Classical fixed-step RK4.

    Parameters
    ----------
    field : callable
        ``field(tau, x) -> dx/dtau``.
    x0 : array_like
        Initial state.
    span : (float, float)
        Start and end of the integration interval.
    steps : int
        Number of equal RK4 steps.

    Returns
    -------
    ndarray, shape (steps + 1, n)
        The trajectory at every step, ``traj[0] == x0``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0, t1 = float(span[0]), float(span[1])
    h = (t1 - t0) / steps
    x = np.array(x0, dtype=float).ravel()
    traj = np.empty((steps + 1, x.size))
    traj[0] = x
    half = 0.5 * h
    for i in range(steps):
        t = t0 + i * h
        k1 = field(t, x)
        k2 = field(t + half, x + half * k1)
        k3 = field(t + half, x + half * k2)
        k4 = field(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(t + h)
        traj[i + 1] = x
    return traj


def matrix_exponential(M, scale: float = 1.0) -> np.ndarray:
    """``exp(M * scale)`` by scaling and squaring a truncated Taylor series."""
    A = np.asarray(M, dtype=float) * float(scale)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix_exponential expects a square matrix")
    n = A.shape[0]
    norm1 = np.abs(A).sum(axis=0).max() if n else 0.0
    if norm1 == 0.0:
        return np.eye(n)
    # bring ||A / 2^s||_1 below 1/2; 20 Taylor terms then leave ~1e-27 truncation
    s = max(0, int(math.ceil(math.log2(norm1 / 0.5))))
    As = A / (2.0**s)
    term = np.eye(n)
    result = np.eye(n)
    for k in range(1, 21):
        term = term @ As / k
        result = result + term
    for _ in range(s):
        result = result @ result
    return result


def spectral_norm(M, tol: float = 1e-13, max_iter: int = 10_000, squarings: int = 40) -> float:
    """Largest singular value by power iteration on ``M^T M``.

    The iteration runs on ``(M^T M)^(2^squarings)`` (normalised repeated
    squaring), which keeps convergence fast when the top two singular values
    are close; the value returned is the Rayleigh quotient of ``M^T M`` itself.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    G = M.T @ M
    n = G.shape[0]
    if not np.any(G):
        return 0.0
    B = G / np.abs(G).max()
    for _ in range(squarings):
        B2 = B @ B
        B2 /= np.abs(B2).max()
        done = np.abs(B2 - B).max() <= 1e-15
        B = B2
        if done:
            break
    # fixed, non-degenerate start vector keeps results reproducible
    v = 1.0 + 0.1 * np.sin(np.arange(1, n + 1) * 1.618)
    v /= np.linalg.norm(v)
    lam = float(v @ G @ v)
    for _ in range(max_iter):
        w = B @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector fell in the null space; restart along a column of G
            w = G[:, np.argmax(np.abs(G).sum(axis=0))]
            nw = np.linalg.norm(w)
        v = w / nw
        lam_new = float(v @ G @ v)
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(max(lam, 0.0))


def jacobi_eigh(S, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    (as columns).
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("jacobi_eigh expects a square matrix")
    scale = max(1.0, np.abs(A).max())
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.tril(A, -1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = c
                J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    w = np.diag(A).copy()
    order = np.argsort(w)
    return w[order], V[:, order]


def symmetric_eigen_extrema(S) -> tuple[float, float]:
    """(lambda_min, lambda_max) of a symmetric matrix."""
    w, _ = jacobi_eigh(S)
    return float(w[0]), float(w[-1])


def sym_sqrt_inv(P) -> np.ndarray:
    """``P^{-1/2}`` for a symmetric positive definite ``P``."""
    w, V = jacobi_eigh(P)
    if w[0] <= 0.0:
        raise ValueError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, column j = (f(x + h e_j) - f(x - h e_j)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float).ravel()
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2.0 * h)
    return J


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == np.cross(a, b)``."""
    a, b, c = np.asarray(v, dtype=float)
    return np.array([[0.0, -c, b], [c, 0.0, -a], [-b, a, 0.0]])


def skew_batch(V) -> np.ndarray:
    """``skew`` applied row-wise to an ``(k, 3)`` array."""
    V = np.asarray(V, dtype=float)
    S = np.zeros((V.shape[0], 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -V[:, 2], V[:, 1]
    S[:, 1, 0], S[:, 1, 2] = V[:, 2], -V[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -V[:, 1], V[:, 0]
    return S


def is_hurwitz(M) -> tuple[bool, np.ndarray]:
    eig = np.linalg.eigvals(np.asarray(M, dtype=float))
    return bool(np.all(eig.real < 0.0)), eig


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A^T P + P A = -Q`` through the vectorized (Kronecker) form."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    I = np.eye(n)
    # vec(A^T P) = (I kron A^T) vec(P), vec(P A) = (A^T kron I) vec(P), column-major vec
    K = np.kron(I, A.T) + np.kron(A.T, I)
    p = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)
