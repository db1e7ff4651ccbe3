"""Backup-CBF safety filters: constraint assembly, robustification and the switched fallback."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backup import Barrier, BackupPolicy, FlowGrid, propagate_flow
from .bounds import FlowBound, TighteningRule, tighten
from .dynamics import InputBox, SystemModel
from .linalg import IntegrationError, symmetric_eigen_extrema
from .qp import QpProblem, QpResult, solve_qp

FILTER_MODES = ("obcbf", "vanilla-bcbf", "none")


@dataclass(frozen=True)
class ClassKappa:
    """Odd polynomial ``c1 r + c3 r^3`` (extended class-K-infinity for c1 > 0, c3 >= 0)."""

    c1: float
    c3: float = 0.0

    def __post_init__(self):
        if self.c1 <= 0.0 or self.c3 < 0.0:
            raise ValueError("need c1 > 0 and c3 >= 0")

    def apply(self, r):
        r = np.asarray(r, dtype=float)
        return self.c1 * r + self.c3 * r**3

    __call__ = apply

    @property
    def description(self) -> str:
        if self.c3 == 0.0:
            return f"linear({self.c1:g})"
        return f"linear-cubic({self.c1:g}, {self.c3:g})"


def robustness_linear_correction(row_gradient, L_now, L_z: float, delta_x_now: float, vbar: float) -> float:
    """Worst case of ``row_gradient @ L (y - z(xhat))`` given the error and noise bounds."""
    r = np.atleast_1d(np.asarray(row_gradient, dtype=float)) @ np.atleast_2d(L_now)
    return float(np.linalg.norm(r)) * (L_z * delta_x_now + vbar)


# ---------------------------------------------------------------------------
# tightening over a whole grid


def _lam_max(P) -> float:
    return symmetric_eigen_extrema(P)[1]


def tighten_grid(rule: TighteningRule, barrier: Barrier, points: np.ndarray, deltas: np.ndarray,
                 lam_max: Optional[float] = None) -> np.ndarray:
    """``tighten`` evaluated at each (point, delta) pair; vectorized for the quadratic bound."""
    points = np.atleast_2d(points)
    deltas = np.maximum(np.asarray(deltas, dtype=float), 0.0)
    if rule.kind == "quadratic" and not rule.exact and barrier.kind == "quadratic-centered":
        lm = lam_max if lam_max is not None else (
            barrier.lam_max if barrier.lam_max is not None else _lam_max(barrier.P))
        Pphi = np.linalg.norm(points @ barrier.P.T, axis=1)
        return deltas**2 * lm + 2.0 * deltas * Pphi
    return np.array([tighten(rule, barrier, p, d) for p, d in zip(points, deltas)])


@dataclass
class ConstraintData:
    """Per-row pieces of a backup-CBF QP, kept for logging and monitors."""

    h_values: np.ndarray        # h(phi(tau_i)) for i < N, then h_b(phi(T))
    eps: np.ndarray
    eps_rate: np.ndarray
    rho: np.ndarray
    grads: np.ndarray           # (c, n) rows of grad h @ Phi

    @property
    def tightened_margins(self) -> np.ndarray:
        return self.h_values - self.eps


def _flow_rows(grid: FlowGrid, h: Barrier, h_b: Barrier):
    """Barrier values and ``grad h @ Phi`` for the N+1 trajectory rows plus the terminal row."""
    pts = grid.states
    vals = np.empty(pts.shape[0] + 1)
    grads = np.empty((pts.shape[0] + 1, pts.shape[1]))
    for i, p in enumerate(pts):
        vals[i] = h(p)
        grads[i] = h.gradient(p)
    vals[-1] = h_b(pts[-1])
    grads[-1] = h_b.gradient(pts[-1])
    Phis = np.concatenate([grid.sensitivities, grid.sensitivities[-1:]], axis=0)
    return vals, np.einsum("in,inm->im", grads, Phis)


def _assemble(sys, xhat, vals, eps, eps_rate, rho, gphi, alpha, alpha_b, kp, box) -> QpProblem:
    g = sys.input_map(xhat)
    f = sys.drift(xhat)
    rows = gphi @ g
    margin = vals - eps
    a = np.empty_like(margin)
    a[:-1] = alpha(margin[:-1])
    a[-1] = alpha_b(margin[-1])
    rhs = -a + eps_rate + rho - gphi @ f
    return QpProblem(np.atleast_1d(kp), rows, rhs, box)


def build_obcbf_qp(grid: FlowGrid, sys: SystemModel, xhat, t: float, barrier_pair, bound: FlowBound,
                   rule: TighteningRule, alpha: ClassKappa, alpha_b: ClassKappa, kp, box: InputBox,
                   gain=None, L_z: float = 1.0, vbar: float = 0.0, rule_b: Optional[TighteningRule] = None,
                   zero_eps_rate: bool = False, rate_step: float = 1e-4):
    """Robustified backup-CBF QP for the current estimate; returns ``(QpProblem, ConstraintData)``."""
    h, h_b = barrier_pair
    rule_b = rule if rule_b is None else rule_b
    xhat = np.asarray(xhat, dtype=float)
    vals, gphi = _flow_rows(grid, h, h_b)
    taus = grid.taus
    pts = np.concatenate([grid.states, grid.states[-1:]], axis=0)

    def eps_at(tt):
        d = bound.grid(taus, tt)
        d = np.concatenate([d, d[-1:]])
        out = np.empty(d.size)
        out[:-1] = tighten_grid(rule, h, pts[:-1], d[:-1])
        out[-1] = tighten_grid(rule_b, h_b, pts[-1:], d[-1:])[0]
        return out, d

    eps, deltas = eps_at(t)
    if zero_eps_rate:
        rate = np.zeros_like(eps)
    elif t - rate_step >= 0.0:
        rate = (eps_at(t + rate_step)[0] - eps_at(t - rate_step)[0]) / (2.0 * rate_step)
    else:
        rate = (-3.0 * eps + 4.0 * eps_at(t + rate_step)[0] - eps_at(t + 2.0 * rate_step)[0]) / (2.0 * rate_step)

    dx = bound.profile(t)
    if gain is None or (vbar == 0.0 and dx == 0.0):
        rho = np.zeros_like(eps)
    else:
        rho = np.linalg.norm(gphi @ np.atleast_2d(gain), axis=1) * (L_z * dx + vbar)
    p = _assemble(sys, xhat, vals, eps, rate, rho, gphi, alpha, alpha_b, kp, box)
    return p, ConstraintData(vals, eps, rate, rho, gphi)


def build_vanilla_bcbf_qp(grid: FlowGrid, sys: SystemModel, xhat, barrier_pair, alpha: ClassKappa,
                          alpha_b: ClassKappa, kp, box: InputBox):
    """Backup-CBF QP that treats the estimate as the true state."""
    h, h_b = barrier_pair
    vals, gphi = _flow_rows(grid, h, h_b)
    z = np.zeros_like(vals)
    p = _assemble(sys, np.asarray(xhat, dtype=float), vals, z, z, z, gphi, alpha, alpha_b, kp, box)
    return p, ConstraintData(vals, z, z.copy(), z.copy(), gphi)


def build_cbf_qp(sys: SystemModel, x, h: Barrier, alpha: ClassKappa, kp, box: InputBox) -> QpProblem:
    """Single-constraint CBF-QP for a barrier with relative degree one."""
    x = np.asarray(x, dtype=float)
    gh = h.gradient(x)
    return QpProblem(np.atleast_1d(kp), (gh @ sys.input_map(x))[None, :],
                     [-float(alpha(h(x))) - gh @ sys.drift(x)], box)


# ---------------------------------------------------------------------------
# the switched filter


@dataclass
class FilterVerdict:
    input: np.ndarray
    mode: str                           # "qp", "backup-fallback" or "passthrough"
    margins: np.ndarray                 # constraint slacks at the applied input
    solve_iterations: int = 0
    tightened_margins: Optional[np.ndarray] = None
    kkt_residual: float = float("nan")
    violated_row: Optional[int] = None
    diagnostic: str = ""
    data: Optional[ConstraintData] = field(default=None, repr=False)


class SafetyFilter:
    """Switched safety filter: QP solution when feasible, backup controller otherwise.

    After a fallback the backup input is held for ``hold_steps`` further calls
    before the QP is attempted again.
    """

    def __init__(self, sys: SystemModel, policy: BackupPolicy, h: Barrier, h_b: Barrier, box: InputBox,
                 T: float, delta: float, alpha: ClassKappa, alpha_b: ClassKappa, mode: str = "obcbf",
                 bound: Optional[FlowBound] = None, rule: Optional[TighteningRule] = None,
                 rule_b: Optional[TighteningRule] = None, L_z: float = 1.0, vbar: float = 0.0,
                 substeps: int = 4, zero_eps_rate: bool = False, hold_steps: int = 1):
        if mode not in FILTER_MODES:
            raise ValueError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")
        if mode == "obcbf" and (bound is None or rule is None):
            raise ValueError("the obcbf filter needs a flow bound and a tightening rule")
        self.sys, self.policy, self.h, self.h_b, self.box = sys, policy, h, h_b, box
        self.T, self.delta = float(T), float(delta)
        self.alpha, self.alpha_b = alpha, alpha_b
        self.mode = mode
        self.bound, self.rule, self.rule_b = bound, rule, rule_b
        self.L_z, self.vbar = float(L_z), float(vbar)
        self.substeps = int(substeps)
        self.zero_eps_rate = zero_eps_rate
        self.hold_steps = int(hold_steps)
        self._hold = 0
        self.fallbacks = 0

    def reset(self):
        self._hold = 0
        self.fallbacks = 0

    def _backup(self, xhat) -> np.ndarray:
        return self.box.clip(self.policy(xhat))

    def build(self, xhat, t: float, kp, gain=None):
        grid = propagate_flow(self.sys, self.policy, xhat, self.T, self.delta, self.substeps)
        if self.mode == "vanilla-bcbf":
            return build_vanilla_bcbf_qp(grid, self.sys, xhat, (self.h, self.h_b), self.alpha, self.alpha_b,
                                         kp, self.box)
        return build_obcbf_qp(grid, self.sys, xhat, t, (self.h, self.h_b), self.bound, self.rule,
                              self.alpha, self.alpha_b, kp, self.box, gain=gain, L_z=self.L_z,
                              vbar=self.vbar, rule_b=self.rule_b, zero_eps_rate=self.zero_eps_rate)

    def safe_control(self, xhat, t: float, kp, gain=None) -> FilterVerdict:
        xhat = np.asarray(xhat, dtype=float)
        kp = np.atleast_1d(np.asarray(kp, dtype=float))
        if self.mode == "none":
            u = self.box.clip(kp)
            return FilterVerdict(u, "passthrough", np.zeros(0))
        try:
            p, data = self.build(xhat, t, kp, gain)
        except (IntegrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
            return self._fallback(xhat, None, None, f"constraint build failed: {exc}")
        if self._hold > 0:
            self._hold -= 1
            return self._fallback(xhat, p, data, "hysteresis hold", count=False)
        try:
            res: QpResult = solve_qp(p)
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            return self._fallback(xhat, p, data, f"solver failure: {exc}")
        if not res.feasible:
            self._hold = self.hold_steps
            v = self._fallback(xhat, p, data, f"QP infeasible (phase-1 slack {res.phase1_slack:.3e})")
            v.violated_row = res.violated_row
            v.solve_iterations = res.iterations
            return v
        u = self.box.clip(res.solution)
        return FilterVerdict(u, "qp", p.slacks(u), res.iterations, data.tightened_margins,
                             res.kkt_residual, data=data)

    def _fallback(self, xhat, p, data, why: str, count: bool = True) -> FilterVerdict:
        if count:
            self.fallbacks += 1
        u = self._backup(xhat)
        margins = p.slacks(u) if p is not None else np.zeros(0)
        tm = data.tightened_margins if data is not None else None
        return FilterVerdict(u, "backup-fallback", margins, 0, tm, diagnostic=why, data=data)
