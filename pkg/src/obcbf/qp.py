"""Dense active-set solver for the safety-filter projection QP.

    minimize    ||u - target||^2
    subject to  rows @ u >= rhs,  lower <= u <= upper

Phase 1 finds a feasible point by a small simplex on the max-violation LP;
phase 2 is the primal active-set method with identity Hessian. Both phases
pick entering/leaving constraints by Bland's smallest-index rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import InputBox

ROW_DROP_TOL = 1e-12
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class QpProblem:
    target: np.ndarray
    constraint_rows: np.ndarray   # (c, m); row i means rows[i] @ u >= rhs[i]
    constraint_rhs: np.ndarray    # (c,)
    box: InputBox

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.target, dtype=float))
        rows = np.asarray(self.constraint_rows, dtype=float).reshape(-1, t.size)
        rhs = np.asarray(self.constraint_rhs, dtype=float).ravel()
        if rows.shape[0] != rhs.size:
            raise ValueError("row/rhs count mismatch")
        if self.box.m != t.size:
            raise ValueError("box dimension does not match the target")
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "constraint_rows", rows)
        object.__setattr__(self, "constraint_rhs", rhs)

    @property
    def m(self) -> int:
        return self.target.size

    def slacks(self, u) -> np.ndarray:
        return self.constraint_rows @ u - self.constraint_rhs


@dataclass
class QpResult:
    feasible: bool
    solution: Optional[np.ndarray]
    iterations: int = 0
    active: list = field(default_factory=list)          # indices into the stacked constraint list
    multipliers: Optional[np.ndarray] = None
    kkt_residual: float = np.nan
    violated_row: Optional[int] = None                  # most-violated original row when infeasible
    phase1_slack: float = 0.0


def _stack(p: QpProblem):
    """Stack kept rows with box rows into ``G u >= b``; return the map back to original rows."""
    norms = np.linalg.norm(p.constraint_rows, axis=1)
    keep = np.flatnonzero(norms >= ROW_DROP_TOL)
    m = p.m
    I = np.eye(m)
    G = np.vstack([p.constraint_rows[keep], I, -I])
    b = np.concatenate([p.constraint_rhs[keep], p.box.lower, -p.box.upper])
    origin = np.concatenate([keep, -1 - np.arange(2 * m)])
    return G, b, origin


def _phase1(G, b, lower, upper, max_iter):
    """Simplex on ``min s  s.t.  G u + s >= b`` (box rows carry no slack), ``s >= 0``.

    Returns (u, s, iterations). Vertices are defined by n = m + 1 active constraints.
    """
    m = G.shape[1]
    n_rows = G.shape[0] - 2 * m
    # augmented constraints A z >= c with z = (u, s)
    A = np.zeros((G.shape[0] + 1, m + 1))
    A[:, :m][: G.shape[0]] = G
    A[:n_rows, m] = 1.0
    A[-1, m] = 1.0                     # s >= 0
    c = np.concatenate([b, [0.0]])
    cost = np.zeros(m + 1)
    cost[m] = 1.0

    # start at the box corner nearest the box centre's sign pattern: u = lower
    u = lower.copy()
    viol = b[:n_rows] - G[:n_rows] @ u if n_rows else np.zeros(0)
    s = max(0.0, float(viol.max())) if n_rows else 0.0
    if s <= 0.0:
        return u, 0.0, 0
    # working set: lower-bound rows of every coordinate plus the most violated row
    W = [n_rows + j for j in range(m)] + [int(np.argmax(viol))]
    z = np.concatenate([u, [s]])
    it = 0
    for it in range(1, max_iter + 1):
        AW = A[W]
        lam = np.linalg.solve(AW.T, cost)
        neg = [i for i, l in enumerate(lam) if l < -1e-12]
        if not neg:
            break
        # Bland: leave the working constraint with the smallest global index
        q = min(neg, key=lambda i: W[i])
        e = np.zeros(len(W))
        e[q] = 1.0
        d = np.linalg.solve(AW, e)     # move off constraint q, keep the others active
        Ad = A @ d
        step = np.inf
        enter = None
        for i in range(A.shape[0]):
            if i in W or Ad[i] >= -1e-14:
                continue
            r = (A[i] @ z - c[i]) / (-Ad[i])
            if r < step - 1e-15 or (abs(r - step) <= 1e-15 and (enter is None or i < enter)):
                step, enter = max(r, 0.0), i
        if enter is None:
            raise RuntimeError("phase-1 LP unbounded; box rows should prevent this")
        z = z + step * d
        W[q] = enter
        if z[m] <= 0.0:
            break
    return z[:m], max(float(z[m]), 0.0), it


def solve_qp(p: QpProblem, max_iter: int = 500) -> QpResult:
    """Solve the projection QP; infeasibility is returned as a verdict, never raised."""
    G, b, origin = _stack(p)
    lower, upper = p.box.lower, p.box.upper
    m = p.m
    n_rows = G.shape[0] - 2 * m
    target = p.target

    u, s, it1 = _phase1(G, b, lower, upper, max_iter)
    if s > FEAS_TOL:
        viol = b[:n_rows] - G[:n_rows] @ u
        worst = int(origin[int(np.argmax(viol))]) if n_rows else None
        return QpResult(False, None, it1, violated_row=worst, phase1_slack=s)

    # phase 2: primal active set; start with the linearly independent active rows at u
    slack = G @ u - b
    W: list[int] = []
    for i in np.flatnonzero(np.abs(slack) <= 1e-10):
        cand = W + [int(i)]
        if len(cand) <= m and np.linalg.matrix_rank(G[cand]) == len(cand):
            W = cand
    iters = it1
    lam = np.zeros(0)
    for _ in range(max_iter):
        iters += 1
        GW = G[W]
        # step p = argmin ||u + p - target||^2 subject to G_W p = 0
        g = u - target
        if W:
            Qn, _ = np.linalg.qr(GW.T, mode="complete")
            Z = Qn[:, len(W):]
            step_dir = -Z @ (Z.T @ g)
        else:
            step_dir = -g
        if np.linalg.norm(step_dir) <= 1e-13 * max(1.0, np.linalg.norm(u)):
            # stationarity: g = G_W^T lam
            lam = np.linalg.lstsq(GW.T, g, rcond=None)[0] if W else np.zeros(0)
            neg = [i for i, l in enumerate(lam) if l < -1e-12]
            if not neg:
                break
            q = min(neg, key=lambda i: W[i])
            W.pop(q)
            continue
        Gp = G @ step_dir
        alpha = 1.0
        block = None
        for i in range(G.shape[0]):
            if i in W or Gp[i] >= -1e-14:
                continue
            r = (b[i] - G[i] @ u) / Gp[i]
            r = max(r, 0.0)
            if r < alpha - 1e-15 or (block is not None and abs(r - alpha) <= 1e-15 and i < block):
                alpha, block = r, i
        u = u + alpha * step_dir
        if block is not None:
            W.append(block)
    else:
        raise RuntimeError("active-set iteration limit reached")

    g = u - target
    resid_stat = np.linalg.norm(g - G[W].T @ lam) if W else np.linalg.norm(g)
    resid_feas = max(0.0, float(np.max(b - G @ u)))
    return QpResult(
        True, u, iters, active=[int(origin[i]) for i in W], multipliers=lam,
        kkt_residual=float(max(resid_stat, resid_feas)),
    )


def kkt_residual(p: QpProblem, u, tol_active: float = 1e-7) -> float:
    """Independent KKT check: feasibility violation plus the distance of ``u - target``
    from the cone of active constraint normals (nonnegative least squares)."""
    G, b, _ = _stack(p)
    slack = G @ u - b
    feas = max(0.0, float(-slack.min()))
    act = np.flatnonzero(slack <= tol_active)
    g = u - p.target
    if act.size == 0:
        return max(feas, float(np.linalg.norm(g)))
    lam = _nnls(G[act].T, g)
    return max(feas, float(np.linalg.norm(G[act].T @ lam - g)))


def _nnls(A, y) -> np.ndarray:
    """Exact nonnegative least squares by enumerating supports (a handful of columns at most)."""
    k = A.shape[1]
    best, best_r = np.zeros(k), float(np.linalg.norm(y))
    for mask in range(1, 1 << k):
        cols = [j for j in range(k) if mask >> j & 1]
        sol, *_ = np.linalg.lstsq(A[:, cols], y, rcond=None)
        if np.any(sol < 0.0):
            continue
        lam = np.zeros(k)
        lam[cols] = sol
        r = float(np.linalg.norm(A @ lam - y))
        if r < best_r:
            best, best_r = lam, r
    return best
