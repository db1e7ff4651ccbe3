"""Closed-loop co-simulation of plant, noisy measurement, estimator and safety filter."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backup import Barrier
from .dynamics import InputBox, SystemModel
from .estimation import ErrorBoundProfile, EstimatorError
from .filter import SafetyFilter
from .linalg import IntegrationError, spectral_norm

NOISE_WAVEFORMS = ("filtered", "multisine")
_BLOCK = 64


# ---------------------------------------------------------------------------
# measurement noise


@dataclass(frozen=True)
class NoiseSpec:
    """Deterministic bounded measurement noise.

    ``filtered``: knots every ``knot_dt`` seconds drawn inside the ``vbar``
    ball, smoothed by a [1/4, 1/2, 1/4] kernel and linearly interpolated.
    Every output is a convex combination of knots, so ``||v|| <= vbar``.
    ``multisine``: ``n_tones`` sinusoids per channel with l1-normalised
    amplitudes, scaled so the vector norm stays below ``vbar``.
    """

    dim: int
    vbar: float
    seed: int = 0
    waveform: str = "filtered"
    knot_dt: float = 0.05
    n_tones: int = 5
    max_freq: float = 10.0

    def __post_init__(self):
        if self.vbar < 0:
            raise ValueError("noise bound must be nonnegative")
        if self.waveform not in NOISE_WAVEFORMS:
            raise ValueError(f"unknown noise waveform {self.waveform!r}; expected one of {NOISE_WAVEFORMS}")
        if self.knot_dt <= 0:
            raise ValueError("knot_dt must be positive")


class NoiseSource:
    """Evaluates a ``NoiseSpec`` with cached knot blocks."""

    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self._blocks: dict[int, np.ndarray] = {}
        if spec.waveform == "multisine":
            rng = np.random.default_rng([spec.seed, 7])
            a = rng.uniform(0.2, 1.0, (spec.dim, spec.n_tones))
            self._amp = a / a.sum(axis=1, keepdims=True) * spec.vbar / math.sqrt(spec.dim)
            self._freq = rng.uniform(0.5, spec.max_freq, (spec.dim, spec.n_tones))
            self._phase = rng.uniform(0.0, 2 * math.pi, (spec.dim, spec.n_tones))

    def _raw_block(self, b: int) -> np.ndarray:
        blk = self._blocks.get(b)
        if blk is None:
            rng = np.random.default_rng([self.spec.seed, b])
            d = rng.standard_normal((_BLOCK, self.spec.dim))
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
            r = rng.uniform(0.5, 1.0, (_BLOCK, 1))
            blk = self.spec.vbar * r * d
            self._blocks[b] = blk
        return blk

    def _raw(self, k: int) -> np.ndarray:
        k = max(k, 0)
        return self._raw_block(k // _BLOCK)[k % _BLOCK]

    def _knot(self, k: int) -> np.ndarray:
        return 0.25 * self._raw(k - 1) + 0.5 * self._raw(k) + 0.25 * self._raw(k + 1)

    def __call__(self, t: float) -> np.ndarray:
        s = self.spec
        if s.vbar == 0.0:
            return np.zeros(s.dim)
        if s.waveform == "multisine":
            v = np.sum(self._amp * np.sin(self._freq * t + self._phase), axis=1)
        else:
            u = max(t, 0.0) / s.knot_dt
            k = int(math.floor(u))
            w = u - k
            v = (1.0 - w) * self._knot(k) + w * self._knot(k + 1)
        n = float(np.linalg.norm(v))
        if n > s.vbar:                      # guard against rounding only
            v = v * (s.vbar / n)
        return v


def noise_sample(t: float, spec: NoiseSpec) -> np.ndarray:
    return NoiseSource(spec)(t)


# ---------------------------------------------------------------------------
# one control period


def step(sys: SystemModel, estimator, x, xhat, extra, u, t: float, dt: float, substeps: int,
         noise: Callable[[float], np.ndarray]):
    """Advance truth, estimate and estimator state over ``[t, t + dt]`` with ``u`` held.

    Returns ``(x, xhat, extra, truth_path)`` where ``truth_path`` holds the true
    state at every RK4 substep (including both ends).
    """
    n = sys.n
    ne = extra.size
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def field_fn(tt, z):
        xs, xh, ex = z[:n], z[n:2 * n], z[2 * n:]
        y = sys.measure(xs) + noise(tt)
        xh_dot, ex_dot = estimator.rates(tt, xh, ex, y, u)
        return np.concatenate([sys.dynamics(xs, u), xh_dot, ex_dot])

    z = np.concatenate([np.asarray(x, float), np.asarray(xhat, float), np.asarray(extra, float)])
    h = dt / substeps
    path = np.empty((substeps + 1, n))
    path[0] = z[:n]
    for i in range(substeps):
        tt = t + i * h
        k1 = field_fn(tt, z)
        k2 = field_fn(tt + 0.5 * h, z + 0.5 * h * k1)
        k3 = field_fn(tt + 0.5 * h, z + 0.5 * h * k2)
        k4 = field_fn(tt + h, z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise IntegrationError(tt + h, f"closed-loop state became non-finite at t={tt + h:.4f}")
        path[i + 1] = z[:n]
    return z[:n], z[n:2 * n], z[2 * n:2 * n + ne], path


# ---------------------------------------------------------------------------
# scenario and log


@dataclass
class Scenario:
    """Everything a closed-loop run needs, already constructed."""

    name: str
    sys: SystemModel
    estimator: object
    profile: ErrorBoundProfile
    h: Barrier
    h_b: Barrier
    box: InputBox
    safety_filter: SafetyFilter
    primary: Callable[[np.ndarray, float], np.ndarray]
    noise: NoiseSpec
    x0: np.ndarray
    xhat0: np.ndarray
    t_final: float
    dt: float
    substeps: int = 4
    max_fallbacks: Optional[int] = None
    certificates: dict = field(default_factory=dict)


@dataclass
class SimLog:
    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    y: np.ndarray
    u: np.ndarray
    mode: list
    h: np.ndarray
    h_b: np.ndarray
    e_norm: np.ndarray
    delta_x: np.ndarray
    margins: list               # per step: constraint slacks at the applied input
    tightened: list             # per step: h(phi(tau_i)) - eps_i, terminal row last
    gain_norm: np.ndarray
    h_min_substep: float
    x_final: np.ndarray
    wall_time: float = 0.0
    diagnostics: list = field(default_factory=list)
    aborted: Optional[str] = None

    @property
    def steps(self) -> int:
        return self.t.size


def run_scenario(sc: Scenario) -> SimLog:
    sys, est, flt = sc.sys, sc.estimator, sc.safety_filter
    flt.reset()
    noise = NoiseSource(sc.noise)
    K = int(round(sc.t_final / sc.dt))
    x = np.array(sc.x0, dtype=float)
    xhat = np.array(sc.xhat0, dtype=float)
    extra = est.extra_state()
    rows = {k: [] for k in ("t", "x", "xhat", "y", "u", "mode", "h", "h_b", "e", "d", "gain")}
    margins, tightened, diags = [], [], []
    h_min = math.inf
    aborted = None
    start = time.perf_counter()
    for k in range(K):
        t = k * sc.dt
        y = sys.measure(x) + noise(t)
        if est.n_extra:
            est.set_extra_state(extra, xhat)
            try:
                est.check_covariance(t)
            except EstimatorError as exc:
                aborted = str(exc)
                break
            gain = est.gain_from_extra(extra, xhat)
        else:
            gain = est.gain_at(t)
        kp = sc.primary(xhat, t)
        verdict = flt.safe_control(xhat, t, kp, gain)
        u = verdict.input
        rows["t"].append(t)
        rows["x"].append(x.copy())
        rows["xhat"].append(xhat.copy())
        rows["y"].append(np.atleast_1d(y))
        rows["u"].append(u.copy())
        rows["mode"].append(verdict.mode)
        rows["h"].append(sc.h(x))
        rows["h_b"].append(sc.h_b(x))
        rows["e"].append(float(np.linalg.norm(x - xhat)))
        rows["d"].append(sc.profile(t))
        rows["gain"].append(spectral_norm(gain))
        margins.append(verdict.margins)
        tightened.append(verdict.tightened_margins if verdict.tightened_margins is not None else np.zeros(0))
        if verdict.diagnostic:
            diags.append(f"t={t:.4f}: {verdict.diagnostic}")
        try:
            x, xhat, extra, path = step(sys, est, x, xhat, extra, u, t, sc.dt, sc.substeps, noise)
        except IntegrationError as exc:
            aborted = str(exc)
            break
        h_min = min(h_min, min(sc.h(p) for p in path))
    wall = time.perf_counter() - start
    if est.n_extra:
        est.set_extra_state(extra, xhat)

    def arr(key, width=None):
        v = rows[key]
        if not v:
            return np.zeros((0, width)) if width else np.zeros(0)
        return np.array(v, dtype=float)

    return SimLog(
        t=arr("t"), x=arr("x", sys.n), xhat=arr("xhat", sys.n), y=arr("y", sys.y_dim), u=arr("u", sys.m),
        mode=rows["mode"], h=arr("h"), h_b=arr("h_b"), e_norm=arr("e"), delta_x=arr("d"),
        margins=margins, tightened=tightened, gain_norm=arr("gain"),
        h_min_substep=float(h_min) if rows["t"] else math.nan, x_final=x,
        wall_time=wall, diagnostics=diags, aborted=aborted,
    )


# ---------------------------------------------------------------------------
# monitors


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    value: float
    detail: str = ""


SAFETY_TOL = 1e-9
TIGHTENED_TOL = 1e-6


def monitor(log: SimLog, sc: Scenario) -> list[Verdict]:
    """Run-level checks: safety, error bound, input bounds, tightened-set
    membership, fallback count, backup-region error and estimator gain bound."""
    out = []
    h_min = float(min(log.h.min(initial=math.inf), log.h_min_substep))
    out.append(Verdict("safety", h_min >= -SAFETY_TOL and log.aborted is None, h_min,
                       "min h(x) over all truth substeps"))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(log.delta_x > 0, log.e_norm / log.delta_x, np.where(log.e_norm > 0, np.inf, 0.0))
    r = float(ratio.max(initial=0.0))
    out.append(Verdict("error-bound", r <= 1.0, r, "max ||e_x|| / delta_x"))
    inside = [sc.box.contains(u) for u in log.u]
    worst_u = float(np.max(np.maximum(log.u - sc.box.upper, sc.box.lower - log.u), initial=-math.inf)) if log.u.size else 0.0
    out.append(Verdict("input-bounds", all(inside), worst_u, "max box violation (<= 0 means inside)"))
    if sc.safety_filter.mode == "none":
        out.append(Verdict("tightened-set", True, math.nan, "not applicable without a filter"))
    else:
        mins = [float(m.min()) for m in log.tightened if m.size]
        tm = min(mins) if mins else math.nan
        out.append(Verdict("tightened-set", bool(mins) and tm >= -TIGHTENED_TOL, tm,
                           "min over steps and rows of h(phi) - eps"))
    nfb = sum(1 for m in log.mode if m == "backup-fallback")
    ok = sc.max_fallbacks is None or nfb <= sc.max_fallbacks
    out.append(Verdict("fallbacks", ok, float(nfb), "backup-fallback steps"))
    in_b = log.h_b >= 0.0
    eb = float(log.e_norm[in_b].max()) if np.any(in_b) else 0.0
    out.append(Verdict("backup-region-error", eb <= sc.profile.backup_region_bound, eb,
                       "max ||e_x|| while the true state is in the backup set"))
    gmax = float(log.gain_norm.max(initial=0.0))
    out.append(Verdict("gain-bound", gmax <= sc.estimator.gain_norm_bound * (1 + 1e-12), gmax,
                       f"max ||L(t)|| against the declared bound {sc.estimator.gain_norm_bound:.6g}"))
    return out


def summarize(log: SimLog, sc: Scenario, verdicts: list[Verdict]) -> dict:
    return {
        "scenario": sc.name,
        "filter_mode": sc.safety_filter.mode,
        "steps": int(log.steps),
        "t_final": float(sc.t_final),
        "min_h": float(min(log.h.min(initial=math.inf), log.h_min_substep)),
        "min_h_b": float(log.h_b.min(initial=math.inf)),
        "max_error_ratio": next(v.value for v in verdicts if v.name == "error-bound"),
        "max_abs_u": float(np.abs(log.u).max(initial=0.0)),
        "fallback_count": int(sum(1 for m in log.mode if m == "backup-fallback")),
        "wall_time_s": float(log.wall_time),
        "aborted": log.aborted,
        "all_passed": all(v.passed for v in verdicts),
        "verdicts": {v.name: {"passed": v.passed, "value": v.value, "detail": v.detail} for v in verdicts},
    }
