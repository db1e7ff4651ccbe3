"""Scenario files: sectioned TOML, validated against a fixed schema and built into a ``Scenario``."""

from __future__ import annotations

import copy
import math
import sys as _sys
from pathlib import Path
from typing import Any

import numpy as np

if _sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backup import (
    CertificationError,
    ball_samples,
    certify_linear_backup_gain,
    linear_policy,
    check_policy_in_box,
    estimate_sup,
    grid_size,
    no_saturation_margin_linear,
    quadratic_barrier,
    saturated_linear_policy,
    spacecraft_gain_ceiling,
    spacecraft_gain_floor,
    spacecraft_policy,
)
from .bounds import (
    ClosedLoopFlowBound,
    GronwallFlowBound,
    LinearFlowBound,
    TighteningRule,
    one_sided_lipschitz_estimate,
)
from .dynamics import InputBox, LinearSystemSpec, make_linear, make_spacecraft, closed_loop_field
from .estimation import (
    ErrorBoundProfile,
    LinearErrorBound,
    RiccatiState,
    constant_gain_observer,
    ekf_estimator,
    error_bound_exponential,
)
from .filter import ClassKappa, SafetyFilter
from .linalg import solve_lyapunov, spectral_norm
from .simulation import NoiseSpec, Scenario

BUNDLED = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


AUTO = "auto"

# every accepted key with its default; None means "required for the chosen kind"
SCHEMA: dict[str, dict[str, Any]] = {
    "system": {
        "model": None,              # double_integrator | spacecraft | linear
        "u_max": None,
        "x_max": 2.0,               # double integrator: |x1| <= x_max
        "omega_max": 0.1,           # spacecraft: ||omega|| <= omega_max
        "inertia": [0.5186, 0.8006, 0.8006],
        "A": None, "B": None, "C": None,
        "safe_P": None, "safe_gamma": None,   # linear: h = gamma - x^T P x
    },
    "estimator": {
        "kind": None,               # luenberger | ekf
        "L": None,
        "W": None, "R": None, "sigma0": None,
        "gain_bound": AUTO,
        "e0": None,
        "e_b": None,
        "error_bound": "linear",    # linear | exponential
        "beta": 0.0, "kappa": 1.0,
        "quad_step": 0.01,
    },
    "backup": {
        "kind": None,               # saturated_linear | linear | spacecraft
        "K": None,
        "Kb": None,
        "Q": None,                  # Lyapunov right-hand side for the backup set
        "gamma": None,
        "domain_radius": AUTO,
        "density": 9,
        "certify": True,
    },
    "filter": {
        "mode": "obcbf",            # obcbf | vanilla-bcbf | none
        "T": None, "delta": None,
        "substeps": 4,
        "alpha": [10.0, 1.0],       # c1 r + c3 r^3
        "alpha_b": [10.0, 0.0],
        "flow_bound": "gronwall",   # gronwall | linear | closed-loop
        "L_f": AUTO, "L_g": AUTO, "u_bar": AUTO, "kappa_cl": AUTO,
        "tightening": "lipschitz",  # exact-linear | quadratic | convex-gradient | lipschitz
        "tightening_b": "",
        "tightening_exact": False,
        "zero_eps_rate": False,
        "hold_steps": 1,
    },
    "noise": {
        "vbar": None,
        "seed": 0,
        "waveform": "filtered",
        "knot_dt": 0.05,
        "n_tones": 5,
        "max_freq": 10.0,
    },
    "run": {
        "name": "",
        "t_final": None,
        "dt": AUTO,
        "substeps": 4,
        "x0": None, "xhat0": None,
        "primary": "zero",          # zero | sine | spacecraft_cos | constant
        "primary_value": 0.0,
        "max_fallbacks": -1,        # -1 disables the fallback-count check
    },
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        cand = BUNDLED / path.name
        if path.parent == Path(".") or str(path.parent) == "scenarios":
            path = cand if cand.exists() else path
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return normalize(raw, source=str(path))


def normalize(raw: dict, source: str = "<config>") -> dict:
    """Check sections and keys against the schema and fill defaults."""
    cfg = {}
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]; expected one of {sorted(SCHEMA)}")
        if not isinstance(keys, dict):
            raise ConfigError(f"{source}: [{sec}] must be a table")
        for k in keys:
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {sec}.{k}")
    for sec, defaults in SCHEMA.items():
        cfg[sec] = copy.deepcopy(defaults)
        cfg[sec].update(copy.deepcopy(raw.get(sec, {})))
    return cfg


def parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    sec, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return sec, key, value


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides or ():
        sec, key, value = parse_override(text)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"override references unknown key {sec}.{key}")
        cfg[sec][key] = value
    return cfg


# ---------------------------------------------------------------------------
# building


def _req(cfg, sec, key):
    v = cfg[sec][key]
    if v is None:
        raise ConfigError(f"missing required key {sec}.{key}")
    return v


def _mat(v, name, rows=None):
    a = np.asarray(v, dtype=float)
    if a.ndim == 1 and rows is not None:
        a = a.reshape(rows, -1)
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    return a


def _spd(v, n, name):
    """Accept a scalar, a diagonal list or a full matrix."""
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        if a.size != n:
            raise ConfigError(f"{name} needs {n} diagonal entries")
        return np.diag(a)
    return a


def _maybe(v, fallback):
    return fallback if (isinstance(v, str) and v == AUTO) else float(v)


def build_scenario(cfg: dict, seed=None) -> Scenario:
    s, e, b, f, nz, r = (cfg[k] for k in ("system", "estimator", "backup", "filter", "noise", "run"))
    model = _req(cfg, "system", "model")
    u_max = float(_req(cfg, "system", "u_max"))
    certificates: dict[str, dict] = {}

    # plant, safe set and linear data
    if model == "double_integrator":
        spec = LinearSystemSpec(A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], C=[[1.0, 0.0]])
        sysm = make_linear(spec, name="double_integrator")
        x_max = float(s["x_max"])
        h = quadratic_barrier(np.diag([1.0, 0.0]), x_max**2, name="h")
        safe_radius = x_max
    elif model == "linear":
        try:
            spec = LinearSystemSpec(_mat(_req(cfg, "system", "A"), "A"), _mat(_req(cfg, "system", "B"), "B"),
                                    _mat(_req(cfg, "system", "C"), "C"))
        except ValueError as exc:
            raise ConfigError(f"[system] {exc}") from None
        sysm = make_linear(spec)
        h = quadratic_barrier(_spd(_req(cfg, "system", "safe_P"), spec.n, "safe_P"),
                              float(_req(cfg, "system", "safe_gamma")))
        safe_radius = math.sqrt(h.gamma / max(np.linalg.eigvalsh(h.P).min(), 1e-12))
    elif model == "spacecraft":
        spec = None
        J = _spd(s["inertia"], 3, "inertia")
        try:
            sysm = make_spacecraft(J)
        except ValueError as exc:
            raise ConfigError(f"[system] {exc}") from None
        w_max = float(s["omega_max"])
        h = quadratic_barrier(np.eye(3), w_max**2, name="h")
        safe_radius = w_max
    else:
        raise ConfigError(f"unknown system.model {model!r}")
    n = sysm.n
    box = InputBox.symmetric(u_max, sysm.m)

    # backup set and controller
    kind = _req(cfg, "backup", "kind")
    gamma = float(_req(cfg, "backup", "gamma"))
    e_b = float(_req(cfg, "estimator", "e_b"))
    radius = _maybe(b["domain_radius"], 1.5 * safe_radius)
    if kind in ("saturated_linear", "linear"):
        if spec is None:
            raise ConfigError("linear backup kinds need a linear plant")
        K = _mat(_req(cfg, "backup", "K"), "K", rows=sysm.m)
        Q = _spd(b["Q"] if b["Q"] is not None else 1.0, n, "Q")
        Acl = spec.A - spec.B @ K
        try:
            P = solve_lyapunov(Acl, Q)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ConfigError(f"Lyapunov solve failed: {exc}") from None
        h_b = quadratic_barrier(P, gamma, name="h_b")
        cert = certify_linear_backup_gain(P, gamma, spec.A, spec.B, K, e_b)
        sat_margin = no_saturation_margin_linear(K, P, gamma, e_b, u_max)
        certificates["linear_backup_gain"] = {
            "passed": bool(cert.certified), "lhs": cert.lambda_min_Q, "rhs": cert.rhs, "margin": cert.margin,
            "rhs_conservative": cert.rhs_conservative, "passed_conservative": bool(cert.certified_conservative),
        }
        certificates["no_saturation"] = {"passed": bool(sat_margin >= 0.0), "margin": sat_margin}
        if kind == "saturated_linear":
            policy = saturated_linear_policy(K, u_max, radius, int(b["density"]))
        else:
            policy = linear_policy(K, radius)
    elif kind == "spacecraft":
        if model != "spacecraft":
            raise ConfigError("the spacecraft backup needs the spacecraft plant")
        Kb = float(_req(cfg, "backup", "Kb"))
        J = sysm.params["J"]
        h_b = quadratic_barrier(0.5 * J, gamma, name="h_b")
        try:
            floor = spacecraft_gain_floor(J, gamma, e_b, float(s["omega_max"]))
        except CertificationError as exc:
            floor = math.inf
            certificates["spacecraft_gain_floor"] = {"passed": False, "detail": str(exc)}
        ceiling = spacecraft_gain_ceiling(J, u_max, float(s["omega_max"]))
        if math.isfinite(floor):
            certificates["spacecraft_gain_floor"] = {"passed": bool(Kb >= floor), "bound": floor, "margin": Kb - floor}
        certificates["spacecraft_gain_ceiling"] = {"passed": bool(Kb <= ceiling), "bound": ceiling,
                                                   "margin": ceiling - Kb}
        policy = spacecraft_policy(J, Kb, radius, int(b["density"]))
    else:
        raise ConfigError(f"unknown backup.kind {kind!r}")
    inner = ball_samples(n, safe_radius, 9)
    certificates["backup_in_box"] = {"passed": bool(check_policy_in_box(policy, box, inner[[h(x) >= 0 for x in inner]], 1e-12))}
    if b["certify"]:
        failed = [k for k, v in certificates.items() if not v["passed"]]
        if failed:
            raise CertificationError("certification failed: " + ", ".join(
                f"{k} (margin {certificates[k].get('margin', float('nan')):.4g})" for k in failed))

    # estimator and error profile
    e0 = float(_req(cfg, "estimator", "e0"))
    vbar = float(_req(cfg, "noise", "vbar"))
    ekind = _req(cfg, "estimator", "kind")
    if ekind == "luenberger":
        if spec is None:
            raise ConfigError("the luenberger estimator needs a linear plant")
        L = _mat(_req(cfg, "estimator", "L"), "L", rows=n)
        try:
            est = constant_gain_observer(spec, L, sysm)
        except Exception as exc:
            raise ConfigError(f"[estimator] {exc}") from None
    elif ekind == "ekf":
        try:
            ric = RiccatiState(_spd(_req(cfg, "estimator", "sigma0"), n, "sigma0"),
                               _spd(_req(cfg, "estimator", "W"), n, "W"),
                               _spd(_req(cfg, "estimator", "R"), sysm.y_dim, "R"))
        except ValueError as exc:
            raise ConfigError(f"[estimator] {exc}") from None
        gb = e["gain_bound"]
        est = ekf_estimator(sysm, ric, None if gb == AUTO else float(gb))
    else:
        raise ConfigError(f"unknown estimator.kind {ekind!r}")
    if e["error_bound"] == "linear":
        if ekind != "luenberger":
            raise ConfigError("estimator.error_bound = 'linear' needs the luenberger estimator")
        lb = LinearErrorBound(est.error_matrix, est.L, e0, vbar, float(e["quad_step"]))
        profile = ErrorBoundProfile(lb, e0, e_b)
    elif e["error_bound"] == "exponential":
        beta, kappa = float(e["beta"]), float(e["kappa"])
        try:
            error_bound_exponential(0.0, e0, beta, kappa)
        except ValueError as exc:
            raise ConfigError(f"[estimator] {exc}") from None
        profile = ErrorBoundProfile(lambda t: error_bound_exponential(t, e0, beta, kappa), e0, e_b)
    else:
        raise ConfigError(f"unknown estimator.error_bound {e['error_bound']!r}")

    # flow bound and tightening
    T, delta = float(_req(cfg, "filter", "T")), float(_req(cfg, "filter", "delta"))
    fb = f["flow_bound"]
    dom = ball_samples(n, radius, 9)
    if fb == "linear":
        if spec is None:
            raise ConfigError("flow_bound = 'linear' needs a linear plant")
        bound = LinearFlowBound(profile, spec.A)
    elif fb == "gronwall":
        L_f = _maybe(f["L_f"], None)
        if L_f is None:
            L_f = estimate_sup(lambda x: spectral_norm(sysm.drift_jacobian(x)), n, radius, 9)
        L_g = _maybe(f["L_g"], 0.0 if sysm.constant_input_map else None)
        if L_g is None:
            raise ConfigError("filter.L_g must be given for a state-dependent input map")
        u_bar = _maybe(f["u_bar"], policy.sup_norm)
        bound = GronwallFlowBound(profile, L_f, L_g, u_bar)
    elif fb == "closed-loop":
        kappa_cl = _maybe(f["kappa_cl"], None)
        if kappa_cl is None:
            _, F_cl = closed_loop_field(sysm, policy.control, policy.control_jacobian)
            kappa_cl = one_sided_lipschitz_estimate(F_cl, dom)
        bound = ClosedLoopFlowBound(profile, kappa_cl, est.gain_norm_bound, sysm.measure_lipschitz, vbar,
                                    delta / 4.0)
    else:
        raise ConfigError(f"unknown filter.flow_bound {fb!r}")
    try:
        rule = TighteningRule(f["tightening"], exact=bool(f["tightening_exact"]))
        rule_b = TighteningRule(f["tightening_b"], exact=bool(f["tightening_exact"])) if f["tightening_b"] else None
        alpha = ClassKappa(*[float(v) for v in f["alpha"]])
        alpha_b = ClassKappa(*[float(v) for v in f["alpha_b"]])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[filter] {exc}") from None

    try:
        flt = SafetyFilter(sysm, policy, h, h_b, box, T, delta, alpha, alpha_b, mode=f["mode"],
                           bound=bound, rule=rule, rule_b=rule_b, L_z=sysm.measure_lipschitz, vbar=vbar,
                           substeps=int(f["substeps"]), zero_eps_rate=bool(f["zero_eps_rate"]),
                           hold_steps=int(f["hold_steps"]))
        grid_size(T, delta)
    except ValueError as exc:
        raise ConfigError(f"[filter] {exc}") from None

    # run settings
    x0 = np.asarray(_req(cfg, "run", "x0"), dtype=float).ravel()
    xhat0 = np.asarray(_req(cfg, "run", "xhat0"), dtype=float).ravel()
    if x0.size != n or xhat0.size != n:
        raise ConfigError(f"run.x0 and run.xhat0 need {n} entries")
    if np.linalg.norm(x0 - xhat0) > e0 + 1e-12:
        raise ConfigError(f"||x0 - xhat0|| = {np.linalg.norm(x0 - xhat0):.4g} exceeds estimator.e0 = {e0}")
    dt = _maybe(r["dt"], delta)
    t_final = float(_req(cfg, "run", "t_final"))
    if dt <= 0 or t_final <= 0:
        raise ConfigError("run.dt and run.t_final must be positive")
    primary = make_primary(r["primary"], u_max, sysm.m, r["primary_value"])
    try:
        noise = NoiseSpec(sysm.y_dim, vbar, int(nz["seed"] if seed is None else seed), nz["waveform"],
                          float(nz["knot_dt"]), int(nz["n_tones"]), float(nz["max_freq"]))
    except ValueError as exc:
        raise ConfigError(f"[noise] {exc}") from None
    mf = int(r["max_fallbacks"])
    return Scenario(
        name=r["name"] or model, sys=sysm, estimator=est, profile=profile, h=h, h_b=h_b, box=box,
        safety_filter=flt, primary=primary, noise=noise, x0=x0, xhat0=xhat0, t_final=t_final, dt=dt,
        substeps=int(r["substeps"]), max_fallbacks=None if mf < 0 else mf, certificates=certificates,
    )


def make_primary(kind: str, u_max: float, m: int, value=0.0):
    """Primary (performance) controllers used by the bundled scenarios."""
    if kind == "zero":
        return lambda xhat, t: np.zeros(m)
    if kind == "constant":
        v = np.broadcast_to(np.asarray(value, dtype=float), (m,)).copy()
        return lambda xhat, t: v
    if kind == "sine":
        return lambda xhat, t: u_max * np.sin(t) * np.ones(m)
    if kind == "spacecraft_cos":
        if m != 3:
            raise ConfigError("spacecraft_cos needs three inputs")
        return lambda xhat, t: u_max * np.cos(np.array([t / 1.5, t / 1.1 + math.pi / 3, t / 2 - math.pi / 4]))
    raise ConfigError(f"unknown run.primary {kind!r}")


def load_scenario(path, overrides=(), seed=None) -> Scenario:
    return build_scenario(apply_overrides(load_config(path), overrides), seed=seed)
