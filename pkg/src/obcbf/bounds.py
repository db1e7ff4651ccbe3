"""Flow-deviation bounds and constraint-tightening terms.

A flow bound ``delta_hat(tau, t)`` bounds the distance between the open-loop
estimated backup flow (computable) and the unknown true flow. Tightening
terms turn that distance into a margin on a barrier value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .backup import Barrier
from .estimation import ErrorBoundProfile
from .linalg import jacobi_eigh, matrix_exponential, spectral_norm, symmetric_eigen_extrema


# ---------------------------------------------------------------------------
# closed-form bounds


def flow_bound_general(delta_x_at_t: float, L_f: float, L_g: float, u_bar: float, tau: float) -> float:
    """Gronwall tube: ``delta_x * exp((L_f + L_g u_bar) tau)``."""
    if min(L_f, L_g, u_bar) < 0:
        raise ValueError("Lipschitz constants and input bound must be nonnegative")
    return delta_x_at_t * math.exp((L_f + L_g * u_bar) * tau)


def flow_bound_linear(delta_x_at_t: float, A, tau: float) -> float:
    """Linear-system tube: ``delta_x * ||exp(A tau)||``."""
    return delta_x_at_t * spectral_norm(matrix_exponential(A, tau))


def _expm1_over(kappa: float, tau: float) -> float:
    """``(exp(kappa tau) - 1) / kappa`` with the ``kappa -> 0`` limit ``tau``."""
    if kappa == 0.0:
        return tau
    return math.expm1(kappa * tau) / kappa


def flow_bound_closed_loop(delta_x: Callable[[float], float], t: float, tau: float, kappa_cl: float,
                           L_bar: float, L_z: float, vbar: float, step: Optional[float] = None) -> float:
    """Tube around the open-loop estimate that contains the true closed-loop flow.

    ``delta_x(t + tau) + L_bar vbar (e^{k tau} - 1)/k
    + L_bar L_z int_0^tau e^{k (tau - s)} delta_x(t + s) ds``, the integral by
    composite trapezoid with spacing at most ``step``.
    """
    if tau <= 0.0:
        return delta_x(t)
    if step is None:
        step = tau / 64.0
    k = max(1, int(math.ceil(tau / step - 1e-12)))
    s = np.linspace(0.0, tau, k + 1)
    vals = np.array([math.exp(kappa_cl * (tau - si)) * delta_x(t + si) for si in s])
    integral = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(s)))
    return delta_x(t + tau) + L_bar * vbar * _expm1_over(kappa_cl, tau) + L_bar * L_z * integral


def one_sided_lipschitz_estimate(F_cl: Callable[[np.ndarray], np.ndarray], domain_samples: Sequence) -> float:
    """Max over samples of the log-norm ``lambda_max((F + F^T)/2)``."""
    best = -math.inf
    for x in domain_samples:
        F = np.asarray(F_cl(np.asarray(x, dtype=float)))
        best = max(best, symmetric_eigen_extrema(0.5 * (F + F.T))[1])
    return best


# ---------------------------------------------------------------------------
# flow-bound objects used by the safety filter


class FlowBound:
    """``delta_hat(tau, t)`` for a fixed error profile. Subclasses supply ``grid``."""

    kind = "abstract"

    def __init__(self, profile: ErrorBoundProfile):
        self.profile = profile

    def evaluate(self, tau: float, t: float) -> float:
        return float(self.grid(np.array([tau]), t)[0])

    def grid(self, taus: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError


class GronwallFlowBound(FlowBound):
    kind = "general-gronwall"

    def __init__(self, profile, L_f: float, L_g: float = 0.0, u_bar: float = 0.0):
        super().__init__(profile)
        if min(L_f, L_g, u_bar) < 0:
            raise ValueError("constants must be nonnegative")
        self.L_f, self.L_g, self.u_bar = float(L_f), float(L_g), float(u_bar)
        self.rate = self.L_f + self.L_g * self.u_bar

    def grid(self, taus, t):
        return self.profile(t) * np.exp(self.rate * np.asarray(taus, dtype=float))


class LinearFlowBound(FlowBound):
    kind = "linear-expm"

    def __init__(self, profile, A):
        super().__init__(profile)
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self._cache: dict[float, float] = {}

    def growth(self, tau: float) -> float:
        key = round(float(tau), 12)
        g = self._cache.get(key)
        if g is None:
            g = spectral_norm(matrix_exponential(self.A, tau))
            self._cache[key] = g
        return g

    def grid(self, taus, t):
        d = self.profile(t)
        return np.array([d * self.growth(tau) for tau in np.atleast_1d(taus)])


class ClosedLoopFlowBound(FlowBound):
    kind = "closed-loop-osl"

    def __init__(self, profile, kappa_cl: float, L_bar: float, L_z: float, vbar: float,
                 quad_step: Optional[float] = None):
        super().__init__(profile)
        self.kappa = float(kappa_cl)
        self.L_bar, self.L_z, self.vbar = float(L_bar), float(L_z), float(vbar)
        self.quad_step = quad_step

    def grid(self, taus, t):
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        if taus.size == 1:
            return np.array([flow_bound_closed_loop(self.profile, t, float(taus[0]), self.kappa,
                                                    self.L_bar, self.L_z, self.vbar, self.quad_step)])
        # one pass over a refined grid serves every tau: the convolution integral
        # obeys I(tau') = e^{k (tau'-tau)} I(tau) + int_tau^tau' e^{k (tau'-s)} d(t+s) ds
        d_tau = float(np.min(np.diff(taus))) if taus.size > 1 else taus[0]
        step = self.quad_step if self.quad_step else d_tau / 4.0
        out = np.empty_like(taus)
        integral = 0.0
        prev_tau = 0.0
        prev_d = self.profile(t)
        for i, tau in enumerate(taus):
            span = tau - prev_tau
            if span > 0:
                k = max(1, int(math.ceil(span / step - 1e-12)))
                h = span / k
                for j in range(k):
                    s1 = prev_tau + (j + 1) * h
                    d1 = self.profile(t + s1)
                    # trapezoid on e^{-k s} d(t+s) over one cell, then re-weight
                    integral = math.exp(self.kappa * h) * integral + 0.5 * h * (
                        math.exp(self.kappa * h) * prev_d + d1)
                    prev_d = d1
                prev_tau = tau
            out[i] = (self.profile(t + tau) + self.L_bar * self.vbar * _expm1_over(self.kappa, tau)
                      + self.L_bar * self.L_z * integral)
        return out


# ---------------------------------------------------------------------------
# tightening


class TighteningError(ValueError):
    pass


TIGHTENING_KINDS = ("exact-linear", "quadratic", "convex-gradient", "lipschitz")


@dataclass(frozen=True)
class TighteningRule:
    """How to turn a tube radius into a barrier margin.

    ``exact`` selects the trust-region supremum for the quadratic kind.
    ``lipschitz_radius=None`` makes the Lipschitz kind local: the constant is
    taken over the origin-centred ball of radius ``||flow_point|| + delta``,
    which contains the whole perturbation ball.
    """

    kind: str
    exact: bool = False
    lipschitz_radius: Optional[float] = None

    def __post_init__(self):
        if self.kind not in TIGHTENING_KINDS:
            raise ValueError(f"unknown tightening kind {self.kind!r}; expected one of {TIGHTENING_KINDS}")

    def epsilon(self, barrier: Barrier, flow_point, delta: float) -> float:
        return tighten(self, barrier, flow_point, delta)


def quadratic_sup(P, phi, radius: float) -> float:
    """Exact ``max_{||d|| <= radius} d^T P d + 2 phi^T P d`` for ``P`` PSD.

    The objective is convex, so the maximizer lies on the sphere. Writing
    ``d = radius w`` and ``b = P phi / radius`` in the eigenbasis of ``P``, the
    maximizer is ``w_i = b_i / (s + g_i)`` with ``g_i = lambda_max - lambda_i``
    and ``s > 0`` the root of ``sum b_i^2 / (s + g_i)^2 = 1`` (bisection on
    ``(0, ||b||]``). The degenerate ("hard") case fills the remaining norm
    along the top eigenvector.
    """
    if radius <= 0.0:
        return 0.0
    P = np.atleast_2d(np.asarray(P, dtype=float))
    lam, V = jacobi_eigh(P)
    c = V.T @ (P @ np.asarray(phi, dtype=float))
    lmax = lam[-1]
    cn = float(np.linalg.norm(c))
    if cn == 0.0:
        return lmax * radius**2
    if lmax * radius <= 1e-17 * cn:
        # quadratic part below rounding of the linear part: the upper bound is attained to machine precision
        return lmax * radius**2 + 2.0 * radius * cn
    top = np.isclose(lam, lmax, rtol=0.0, atol=1e-12 * max(1.0, abs(lmax)))
    gap = np.where(top, 0.0, lmax - lam)
    b = c / radius
    bn = cn / radius

    def value(w):
        return radius**2 * float(w @ (lam * w) + 2.0 * b @ w)

    if np.all(np.abs(b[top]) <= 1e-14 * bn):
        rest = ~top
        lim = float(np.sum((b[rest] / gap[rest]) ** 2)) if rest.any() else 0.0
        if lim <= 1.0:
            w = np.zeros_like(b)
            w[rest] = b[rest] / gap[rest]
            w[np.argmax(top)] = math.sqrt(max(1.0 - lim, 0.0))
            return value(w)
    lo, hi = 0.0, bn
    for _ in range(2100):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if float(np.sum((b / (mid + gap)) ** 2)) > 1.0:
            lo = mid
        else:
            hi = mid
    w = b / (hi + gap)
    w /= np.linalg.norm(w)
    return value(w)


def quadratic_overapprox(P, phi, radius: float) -> float:
    """``radius^2 lambda_max(P) + 2 radius ||P phi||``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    lmax = symmetric_eigen_extrema(P)[1]
    return radius**2 * lmax + 2.0 * radius * float(np.linalg.norm(P @ np.asarray(phi, dtype=float)))


def tighten(rule: TighteningRule, barrier: Barrier, flow_point, delta: float) -> float:
    """Margin ``eps >= sup_{||d|| <= delta} h(p) - h(p + d)``."""
    if delta < 0:
        raise ValueError("tube radius must be nonnegative")
    if delta == 0.0:
        return 0.0
    p = np.asarray(flow_point, dtype=float)
    kind = rule.kind
    if kind == "exact-linear":
        if barrier.kind != "linear":
            raise TighteningError("exact-linear tightening needs a linear barrier")
        return float(np.linalg.norm(barrier.a)) * delta
    if kind == "quadratic":
        if barrier.kind != "quadratic-centered":
            raise TighteningError("quadratic tightening needs a quadratic-centered barrier")
        if rule.exact:
            return quadratic_sup(barrier.P, p, delta)
        return quadratic_overapprox(barrier.P, p, delta)
    if kind == "convex-gradient":
        if not barrier.convex:
            raise TighteningError("convex-gradient tightening needs a convex barrier")
        return float(np.linalg.norm(barrier.gradient(p))) * delta
    # lipschitz
    radius = rule.lipschitz_radius if rule.lipschitz_radius is not None else float(np.linalg.norm(p)) + delta
    return barrier.lipschitz_on(radius) * delta


def tightening_rate(rule: TighteningRule, barrier: Barrier, flow_point, delta_fn: Callable[[float], float],
                    t: float, step: float = 1e-4, zeroed: bool = False) -> float:
    """Rate of ``eps`` in global time at fixed flow point (central difference;
    second-order one-sided when ``t - step < 0``)."""
    if zeroed:
        return 0.0

    def eps(tt):
        return tighten(rule, barrier, flow_point, max(delta_fn(tt), 0.0))

    if t - step >= 0.0:
        return (eps(t + step) - eps(t - step)) / (2.0 * step)
    return (-3.0 * eps(t) + 4.0 * eps(t + step) - eps(t + 2.0 * step)) / (2.0 * step)
