"""Acceptance suite: one function per criterion, shared by the test-suite and ``obcbf accept``.

Each criterion returns a ``CriterionResult`` whose ``line()`` is the one-line
pass/fail report.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .backup import linear_barrier, outside_ball_barrier, propagate_flow, quadratic_barrier
from .bounds import ClosedLoopFlowBound, GronwallFlowBound, LinearFlowBound, TighteningRule, quadratic_sup, tighten
from .dynamics import InputBox
from .qp import QpProblem, kkt_residual, solve_qp
from .scenario import load_scenario
from .simulation import NoiseSource, SAFETY_TOL, run_scenario

CASE1 = "double_integrator.toml"
CASE2 = "spacecraft.toml"
CASE2_BASELINE = "spacecraft_vanilla.toml"


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number} {'PASS' if self.passed else 'FAIL'}  {self.title}: {self.detail}"


@dataclass(frozen=True)
class Criterion:
    number: int
    title: str
    fn: Callable[[], tuple[bool, str]]

    def run(self) -> CriterionResult:
        passed, detail = self.fn()
        return CriterionResult(self.number, self.title, bool(passed), detail)


# ---------------------------------------------------------------------------
# 1-2: case-study reproduction


def criterion_1() -> tuple[bool, str]:
    sc = load_scenario(CASE1)
    log = run_scenario(sc)
    min_h = float(min(log.h.min(), log.h_min_substep))
    ratio = float(np.max(log.e_norm / log.delta_x))
    max_u = float(np.abs(log.u).max())
    falls = sum(1 for m in log.mode if m == "backup-fallback")
    ok = min_h >= -1e-6 and ratio <= 1.0 and max_u <= 2.0 and falls == 0 and log.aborted is None
    return ok, (f"min h={min_h:.4g}, max |e|/delta_x={ratio:.4f}, max |u|={max_u:.4g}, "
                f"fallbacks={falls}, wall={log.wall_time:.1f}s")


def criterion_2() -> tuple[bool, str]:
    sc = load_scenario(CASE2)
    log = run_scenario(sc)
    base_sc = load_scenario(CASE2_BASELINE)
    base = run_scenario(base_sc)
    min_h = float(min(log.h.min(), log.h_min_substep))
    min_h_base = float(min(base.h.min(), base.h_min_substep))
    u_inf = float(np.abs(log.u).max())
    ok = (min_h >= -SAFETY_TOL and u_inf <= 0.03 and min_h_base < 0.0
          and log.wall_time <= 60.0 and base.wall_time <= 60.0
          and log.aborted is None and base.aborted is None)
    return ok, (f"O-bCBF min h={min_h:.4g}, max |u_i|={u_inf:.4g}; baseline min h={min_h_base:.4g}; "
                f"wall {log.wall_time:.1f}s / {base.wall_time:.1f}s")


# ---------------------------------------------------------------------------
# 3: certificates


def criterion_3() -> tuple[bool, str]:
    c1 = load_scenario(CASE1).certificates["linear_backup_gain"]
    sc2 = load_scenario(CASE2)
    floor = sc2.certificates["spacecraft_gain_floor"]["bound"]
    ceiling = sc2.certificates["spacecraft_gain_ceiling"]["bound"]
    Kb = 0.2746
    ok = bool(c1["passed"]) and floor <= Kb <= ceiling
    return ok, (f"linear gain margin={c1['margin']:.4g}; spacecraft floor={floor:.4g} <= Kb={Kb} "
                f"<= ceiling={ceiling:.4g}")


# ---------------------------------------------------------------------------
# 4: flow-bound containment


def _ball_point(rng, n: int, radius: float) -> np.ndarray:
    d = rng.normal(size=n)
    return d / np.linalg.norm(d) * radius * rng.uniform() ** (1.0 / n)


def open_loop_pair(sc, x0, xhat0, T: float, delta: float, substeps: int = 4):
    """Estimated flow from ``xhat0`` and the true flow from ``x0`` driven by the same input."""
    sys, pol = sc.sys, sc.safety_filter.policy
    n = sys.n

    def field(z):
        ph, x = z[:n], z[n:]
        u = pol(ph)
        return np.concatenate([sys.dynamics(ph, u), sys.dynamics(x, u)])

    return _rk4_grid(field, np.concatenate([xhat0, x0]), T, delta, substeps, n)


def _rk4_grid(field, z, T, delta, substeps, n):
    N = int(round(T / delta))
    h = delta / substeps
    est, true = [z[:n].copy()], [z[n:2 * n].copy()]
    for _ in range(N):
        for _ in range(substeps):
            k1 = field(z)
            k2 = field(z + 0.5 * h * k1)
            k3 = field(z + 0.5 * h * k2)
            k4 = field(z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        est.append(z[:n].copy())
        true.append(z[n:2 * n].copy())
    return np.array(est), np.array(true)


def closed_loop_pair(sc, x0, xhat0, T: float, delta: float, noise, substeps: int = 4):
    """Open-loop estimated flow from ``xhat0`` and the true state under ``u = k_b(xhat)``.

    Time is measured from the start of the window; the noise is read at the
    same times.
    """
    sys, pol, est = sc.sys, sc.safety_filter.policy, sc.estimator
    n = sys.n
    N = int(round(T / delta))
    h = delta / substeps
    extra = np.asarray(est.extra_state(), dtype=float)

    def field(t, z):
        ph, x, xh, ex = z[:n], z[n:2 * n], z[2 * n:3 * n], z[3 * n:]
        u = pol(xh)
        y = sys.measure(x) + noise(t)
        xh_dot, ex_dot = est.rates(t, xh, ex, y, u)
        return np.concatenate([sys.dynamics(ph, pol(ph)), sys.dynamics(x, u), xh_dot, ex_dot])

    z = np.concatenate([xhat0, x0, xhat0, extra])
    phis, xs, errs = [z[:n].copy()], [z[n:2 * n].copy()], [float(np.linalg.norm(x0 - xhat0))]
    t = 0.0
    for _ in range(N):
        for _ in range(substeps):
            k1 = field(t, z)
            k2 = field(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = field(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = field(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        phis.append(z[:n].copy())
        xs.append(z[n:2 * n].copy())
        errs.append(float(np.linalg.norm(z[n:2 * n] - z[2 * n:3 * n])))
    return np.array(phis), np.array(xs), np.array(errs)


def flow_containment(pairs: int = 200, seed: int = 0) -> dict[str, float]:
    """Worst ``||dphi(tau)|| - delta_hat(tau, 0)`` over random pairs, per system and bound."""
    rng = np.random.default_rng(seed)
    out = {}

    sc = load_scenario(CASE1)
    flt = sc.safety_filter
    taus = np.linspace(0.0, flt.T, int(round(flt.T / flt.delta)) + 1)
    e0 = sc.profile.initial_bound
    bounds = {"double_integrator/linear": LinearFlowBound(sc.profile, np.array([[0.0, 1.0], [0.0, 0.0]])),
              "double_integrator/gronwall": GronwallFlowBound(sc.profile, 1.0)}
    grids = {k: b.grid(taus, 0.0) for k, b in bounds.items()}
    worst = {k: -math.inf for k in bounds}
    for _ in range(pairs):
        xhat0 = _ball_point(rng, 2, 2.0)
        x0 = xhat0 + _ball_point(rng, 2, e0)
        est, true = open_loop_pair(sc, x0, xhat0, flt.T, flt.delta)
        dev = np.linalg.norm(true - est, axis=1)
        for k in bounds:
            worst[k] = max(worst[k], float(np.max(dev - grids[k])))
    out.update(worst)

    sc = load_scenario(CASE2)
    flt = sc.safety_filter
    taus = np.linspace(0.0, flt.T, int(round(flt.T / flt.delta)) + 1)
    e0 = sc.profile.initial_bound
    gron = flt.bound.grid(taus, 0.0)
    Kb = sc.safety_filter.policy.params["Kb"]
    cl = ClosedLoopFlowBound(sc.profile, -Kb, sc.estimator.gain_norm_bound, sc.sys.measure_lipschitz,
                             sc.noise.vbar, flt.delta / 4.0).grid(taus, 0.0)
    w_g = w_cl = w_err = -math.inf
    sigma0 = sc.estimator.extra_state()
    for i in range(pairs):
        xhat0 = _ball_point(rng, 3, 0.1)
        x0 = xhat0 + _ball_point(rng, 3, e0)
        est, true = open_loop_pair(sc, x0, xhat0, flt.T, flt.delta)
        w_g = max(w_g, float(np.max(np.linalg.norm(true - est, axis=1) - gron)))
        sc.estimator.set_extra_state(sigma0, xhat0)
        noise = NoiseSource(replace(sc.noise, seed=1000 + i))
        phis, xs, errs = closed_loop_pair(sc, x0, xhat0, flt.T, flt.delta, noise)
        w_cl = max(w_cl, float(np.max(np.linalg.norm(xs - phis, axis=1) - cl)))
        w_err = max(w_err, float(np.max(errs - np.array([sc.profile(t) for t in taus]))))
    out["spacecraft/gronwall"] = w_g
    out["spacecraft/closed-loop"] = w_cl
    out["spacecraft/estimator-error-excess"] = w_err
    return out


def criterion_4() -> tuple[bool, str]:
    worst = flow_containment()
    checked = {k: v for k, v in worst.items() if not k.endswith("excess")}
    ok = all(v <= 1e-9 for v in checked.values())
    return ok, "max(||dphi|| - bound): " + ", ".join(f"{k}={v:.3g}" for k, v in checked.items())


# ---------------------------------------------------------------------------
# 5: estimator bound under noise


def estimator_bound_excess(seeds: int = 50) -> list[float]:
    """Per seed, ``max_t ||e_x(t)|| - delta_x(t)`` on Case 1 (filter bypassed, see below).

    The error of a constant-gain observer on a linear plant does not depend on
    the input, so the filter is bypassed to keep 50 runs cheap.
    """
    out = []
    for s in range(seeds):
        sc = load_scenario(CASE1, ["filter.mode=\"none\""], seed=s)
        log = run_scenario(sc)
        out.append(float(np.max(log.e_norm - log.delta_x)))
    return out


def criterion_5() -> tuple[bool, str]:
    ex = estimator_bound_excess()
    return max(ex) <= 0.0, f"{len(ex)} seeds, max(||e_x|| - delta_x)={max(ex):.4g}"


# ---------------------------------------------------------------------------
# 6: QP oracle


def random_qp(rng) -> QpProblem:
    m = int(rng.integers(1, 3))
    u_max = float(rng.uniform(0.5, 3.0))
    rows = int(rng.integers(0, 4))
    A = rng.normal(size=(rows, m))
    b = rng.normal(size=rows) * u_max * 0.7
    target = rng.uniform(-2.0 * u_max, 2.0 * u_max, size=m)
    return QpProblem(target, A.reshape(rows, m), b, InputBox.symmetric(u_max, m))


def _feasible(p: QpProblem, U, tol: float = 1e-12):
    ok = np.all((U >= p.box.lower - tol) & (U <= p.box.upper + tol), axis=1)
    if p.constraint_rows.size:
        ok &= np.all(U @ p.constraint_rows.T - p.constraint_rhs >= -tol, axis=1)
    return ok


def _line_search(p: QpProblem, origin, direction, s_lo: float, s_hi: float, levels: int = 12):
    """Best feasible point of ``origin + s direction``, ``s in [s_lo, s_hi]``, by nested 1-D grids."""
    best, best_f = None, math.inf
    lo, hi, pts = s_lo, s_hi, 20001
    for _ in range(levels):
        s = np.linspace(lo, hi, pts)
        U = origin + s[:, None] * direction
        ok = _feasible(p, U)
        if ok.any():
            F = np.sum((U[ok] - p.target) ** 2, axis=1)
            k = int(np.argmin(F))
            if F[k] < best_f:
                best_f, best, s_best = float(F[k]), U[ok][k], s[ok][k]
        if best is None:
            return None, math.inf
        cell = (hi - lo) / (pts - 1)
        lo, hi, pts = max(s_lo, s_best - 10 * cell), min(s_hi, s_best + 10 * cell), 201
    return best, best_f


def grid_search_qp(p: QpProblem):
    """Exhaustive grid search for ``min ||u - target||^2``; ``None`` if no grid point is feasible.

    The box is gridded for interior minimizers and every boundary line
    (constraint rows and box faces) is gridded on its own, so minimizers on a
    face or a vertex are reached without relying on lattice points that
    happen to lie near a tilted constraint.
    """
    m = p.m
    lo, hi = p.box.lower, p.box.upper
    rows = [(np.asarray(r, dtype=float), float(c)) for r, c in zip(p.constraint_rows, p.constraint_rhs)]
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        rows += [(e, float(lo[i])), (-e, -float(hi[i]))]
    cands = []
    if m == 1:
        U = np.linspace(lo[0], hi[0], 200001)[:, None]
        U = np.concatenate([U, np.array([[c / r[0]] for r, c in rows if r[0] != 0.0])])
        ok = _feasible(p, U)
        if not ok.any():
            return None
        F = np.sum((U[ok] - p.target) ** 2, axis=1)
        return U[ok][int(np.argmin(F))]
    if m != 2:
        raise ValueError("grid search supports one or two inputs")
    wlo, whi, pts = lo, hi, 1001
    for _ in range(10):
        axes = [np.linspace(wlo[i], whi[i], pts) for i in range(2)]
        U = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
        ok = _feasible(p, U)
        if not ok.any():
            break
        F = np.sum((U[ok] - p.target) ** 2, axis=1)
        k = int(np.argmin(F))
        cands.append((float(F[k]), U[ok][k]))
        cell = (whi - wlo) / (pts - 1)
        wlo, whi, pts = np.maximum(lo, U[ok][k] - 10 * cell), np.minimum(hi, U[ok][k] + 10 * cell), 201
    span = float(np.linalg.norm(hi - lo))
    for r, c in rows:
        nr = float(np.linalg.norm(r))
        if nr < 1e-12:
            continue
        origin = r * c / nr**2
        direction = np.array([-r[1], r[0]]) / nr
        centre = origin + direction * float(direction @ (0.5 * (lo + hi) - origin))
        u, f = _line_search(p, centre, direction, -span, span)
        if u is not None:
            cands.append((f, u))
    if not cands:
        return None
    return min(cands, key=lambda t: t[0])[1]


def qp_oracle_check(instances: int = 100, seed: int = 7) -> dict:
    rng = np.random.default_rng(seed)
    worst_dist, worst_kkt, mismatches, feasible = 0.0, 0.0, 0, 0
    for _ in range(instances):
        p = random_qp(rng)
        res = solve_qp(p)
        ref = grid_search_qp(p)
        if res.feasible != (ref is not None):
            mismatches += 1
            continue
        if not res.feasible:
            continue
        feasible += 1
        worst_dist = max(worst_dist, float(np.linalg.norm(res.solution - ref)))
        worst_kkt = max(worst_kkt, res.kkt_residual, kkt_residual(p, res.solution))
    return {"max_distance": worst_dist, "max_kkt": worst_kkt, "mismatches": mismatches, "feasible": feasible}


def criterion_6() -> tuple[bool, str]:
    r = qp_oracle_check()
    ok = r["mismatches"] == 0 and r["max_distance"] <= 2e-3 and r["max_kkt"] <= 1e-6
    return ok, (f"{r['feasible']} feasible of 100, verdict mismatches={r['mismatches']}, "
                f"max |u - u_grid|={r['max_distance']:.3g}, max KKT residual={r['max_kkt']:.3g}")


# ---------------------------------------------------------------------------
# 7: sensitivities


def sensitivity_error(sc, xhat, fd_step: float) -> float:
    flt = sc.safety_filter
    Phi = propagate_flow(sc.sys, flt.policy, xhat, flt.T, flt.delta, flt.substeps).sensitivities[-1]
    n = sc.sys.n
    fd = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = fd_step
        hi = propagate_flow(sc.sys, flt.policy, xhat + e, flt.T, flt.delta, flt.substeps).states[-1]
        lo = propagate_flow(sc.sys, flt.policy, xhat - e, flt.T, flt.delta, flt.substeps).states[-1]
        fd[:, j] = (hi - lo) / (2.0 * fd_step)
    return float(np.linalg.norm(Phi - fd) / np.linalg.norm(fd))


def criterion_7() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    worst = {}
    for name, radius in ((CASE1, 2.0), (CASE2, 0.1)):
        sc = load_scenario(name)
        worst[sc.name] = max(sensitivity_error(sc, _ball_point(rng, sc.sys.n, radius), 1e-5 * radius)
                             for _ in range(10))
    ok = all(v <= 1e-4 for v in worst.values())
    return ok, "max relative error " + ", ".join(f"{k}={v:.3g}" for k, v in worst.items())


# ---------------------------------------------------------------------------
# 8: tightening soundness


def sphere_sup(fn: Callable[[np.ndarray], np.ndarray], n: int, radius: float) -> float:
    """Brute-force max of ``fn`` over the sphere of given radius (n = 2 or 3), batched ``fn``."""
    if n == 2:
        th = np.linspace(0.0, 2.0 * math.pi, 20001)
        D = radius * np.stack([np.cos(th), np.sin(th)], axis=1)
        vals = fn(D)
        k = int(np.argmax(vals))
        c, w = th[k], th[1] - th[0]
        for _ in range(8):
            th = np.linspace(c - w, c + w, 201)
            v = fn(radius * np.stack([np.cos(th), np.sin(th)], axis=1))
            k = int(np.argmax(v))
            c, w = th[k], 2.0 * (th[1] - th[0])
        return float(max(vals.max(), v.max()))
    if n != 3:
        raise ValueError("sphere_sup supports n = 2 or 3")

    def pts(a, b):
        A, B = np.meshgrid(a, b, indexing="ij")
        return radius * np.stack([np.sin(A) * np.cos(B), np.sin(A) * np.sin(B), np.cos(A)], axis=-1).reshape(-1, 3), A.ravel(), B.ravel()

    P, A, B = pts(np.linspace(0.0, math.pi, 401), np.linspace(0.0, 2.0 * math.pi, 801))
    vals = fn(P)
    best = float(vals.max())
    for k in np.argsort(vals)[-5:]:
        ca, cb, wa, wb = A[k], B[k], math.pi / 400, 2.0 * math.pi / 800
        for _ in range(8):
            P2, A2, B2 = pts(np.linspace(ca - wa, ca + wa, 41), np.linspace(cb - wb, cb + wb, 41))
            v = fn(P2)
            j = int(np.argmax(v))
            best = max(best, float(v[j]))
            ca, cb, wa, wb = A2[j], B2[j], wa / 10.0, wb / 10.0
    return best


def tightening_cases():
    """(label, rule, barrier) triples covering every tightening kind."""
    P1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    P2 = np.array([[2.1, 0.4], [0.4, 0.9]])
    J = np.diag([0.5186, 0.8006, 0.8006])
    quads = [("psd2", quadratic_barrier(P1, 4.0)), ("pd2", quadratic_barrier(P2, 1.0)),
             ("identity3", quadratic_barrier(np.eye(3), 0.01)), ("inertia3", quadratic_barrier(0.5 * J, 0.0013))]
    out = []
    for label, bar in quads:
        out.append((f"quadratic/{label}", TighteningRule("quadratic"), bar))
        out.append((f"quadratic-exact/{label}", TighteningRule("quadratic", exact=True), bar))
        out.append((f"lipschitz/{label}", TighteningRule("lipschitz"), bar))
    lin = linear_barrier([0.3, -1.2, 0.5], 0.7)
    ball = outside_ball_barrier([0.5, -0.2], 0.4)
    out += [("exact-linear/linear3", TighteningRule("exact-linear"), lin),
            ("lipschitz/linear3", TighteningRule("lipschitz"), lin),
            ("convex-gradient/ball2", TighteningRule("convex-gradient"), ball),
            ("lipschitz/ball2", TighteningRule("lipschitz"), ball)]
    return out


def _dim(bar) -> int:
    if bar.P is not None:
        return bar.P.shape[0]
    if bar.a is not None:
        return bar.a.size
    return 2


def tightening_soundness(points: int = 10, samples: int = 1000, seed: int = 5) -> dict[str, float]:
    """Per case, the worst ``empirical sup - eps`` (must be <= 0)."""
    rng = np.random.default_rng(seed)
    out = {}
    for label, rule, bar in tightening_cases():
        n = _dim(bar)
        worst = -math.inf
        for _ in range(points):
            phi = rng.normal(size=n) * (0.05 if n == 3 else 1.0)
            delta = float(rng.uniform(0.001, 0.05 if n == 3 else 0.5))
            eps = tighten(rule, bar, phi, delta)
            D = rng.normal(size=(samples, n))
            D *= (delta * rng.uniform(size=samples) ** (1.0 / n) / np.linalg.norm(D, axis=1))[:, None]
            D[: samples // 2] *= (delta / np.linalg.norm(D[: samples // 2], axis=1))[:, None]
            h0 = bar(phi)
            emp = max(h0 - bar(phi + d) for d in D)
            worst = max(worst, emp - eps)
        out[label] = worst
    return out


def quadratic_exact_error(points: int = 10, seed: int = 9) -> float:
    """Worst ``|quadratic_sup - brute force|`` on the quadratic test barriers."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, rule, bar in tightening_cases():
        if not (rule.kind == "quadratic" and rule.exact):
            continue
        n = bar.P.shape[0]
        P = bar.P
        for _ in range(points):
            phi = rng.normal(size=n) * (0.05 if n == 3 else 1.0)
            delta = float(rng.uniform(0.001, 0.05 if n == 3 else 0.5))

            def gap(D):
                return 2.0 * D @ (P @ phi) + np.einsum("ij,jk,ik->i", D, P, D)

            worst = max(worst, abs(quadratic_sup(P, phi, delta) - sphere_sup(gap, n, delta)))
    return worst


def criterion_8() -> tuple[bool, str]:
    sound = tightening_soundness()
    err = quadratic_exact_error()
    worst_case = max(sound, key=sound.get)
    ok = all(v <= 1e-12 for v in sound.values()) and err <= 1e-6
    return ok, (f"{len(sound)} rule/barrier pairs, worst (sup - eps)={sound[worst_case]:.3g} ({worst_case}); "
                f"exact quadratic vs brute force max error={err:.3g}")


CRITERIA = [
    Criterion(1, "double-integrator reproduction", criterion_1),
    Criterion(2, "spacecraft reproduction vs baseline", criterion_2),
    Criterion(3, "certification margins", criterion_3),
    Criterion(4, "flow-bound containment", criterion_4),
    Criterion(5, "estimator error bound under noise", criterion_5),
    Criterion(6, "QP oracle equivalence", criterion_6),
    Criterion(7, "sensitivity correctness", criterion_7),
    Criterion(8, "tightening soundness", criterion_8),
]


def run_all(only=None) -> list[CriterionResult]:
    results = []
    for c in CRITERIA:
        if only and c.number not in only:
            continue
        t0 = time.perf_counter()
        r = c.run()
        r.detail += f" [{time.perf_counter() - t0:.1f}s]"
        results.append(r)
    return results
