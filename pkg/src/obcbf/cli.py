"""Command-line front end: run scenarios, print certificates, sweep one key, run the acceptance suite.

Exit codes: 0 when every monitor passes, 1 when a monitor fails, 2 on
configuration or certification errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backup import CertificationError
from .scenario import ConfigError, apply_overrides, build_scenario, load_config, parse_override
from .simulation import SimLog, Scenario, monitor, run_scenario, summarize

EXIT_OK, EXIT_MONITOR, EXIT_CONFIG = 0, 1, 2


def fmt(v: float) -> str:
    """17 significant digits: enough for an exact float round trip."""
    return format(float(v), ".17g")


def trajectory_header(sc: Scenario) -> list[str]:
    n, m, p = sc.sys.n, sc.sys.m, sc.sys.y_dim
    return (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"xhat_{i + 1}" for i in range(n)]
            + [f"y_{i + 1}" for i in range(p)] + [f"u_{i + 1}" for i in range(m)]
            + ["h", "h_b", "e_norm", "delta_x", "mode"])


def write_trajectory(path: Path, log: SimLog, sc: Scenario) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(sc))
        for k in range(log.steps):
            row = [log.t[k], *log.x[k], *log.xhat[k], *np.atleast_1d(log.y[k]), *np.atleast_1d(log.u[k]),
                   log.h[k], log.h_b[k], log.e_norm[k], log.delta_x[k]]
            w.writerow([fmt(v) for v in row] + [log.mode[k]])


def write_margins(path: Path, log: SimLog) -> None:
    """Per step: slack of every constraint at the applied input, then h(phi_i) - eps_i."""
    c = max([len(m) for m in log.margins] + [0 if t is None else len(t) for t in log.tightened] + [0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mode"] + [f"slack_{i}" for i in range(c)] + [f"tightened_{i}" for i in range(c)])
        for k in range(log.steps):
            s = [fmt(v) for v in log.margins[k]]
            tm = log.tightened[k]
            tt = [] if tm is None else [fmt(v) for v in tm]
            w.writerow([fmt(log.t[k]), log.mode[k]] + s + [""] * (c - len(s)) + tt + [""] * (c - len(tt)))


def read_trajectory(path) -> dict[str, list]:
    """Columns of a trajectory.csv as floats (``mode`` kept as strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: [r[j] if name == "mode" else float(r[j]) for r in body] for j, name in enumerate(header)}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _load(args, extra=()):
    cfg = load_config(args.scenario)
    cfg = apply_overrides(cfg, list(args.set or ()) + list(extra))
    return cfg, build_scenario(cfg, seed=args.seed)


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def simulate(sc: Scenario) -> tuple[SimLog, list, dict]:
    log = run_scenario(sc)
    verdicts = monitor(log, sc)
    return log, verdicts, summarize(log, sc, verdicts)


def cmd_run(args) -> int:
    try:
        _, sc = _load(args)
    except (ConfigError, CertificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log, verdicts, summary = simulate(sc)
    out = Path(args.out or f"out/{sc.name}")
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.csv", log, sc)
    write_margins(out / "margins.csv", log)
    summary["certificates"] = sc.certificates
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    for v in verdicts:
        _say(args, f"{'PASS' if v.passed else 'FAIL'}  {v.name:<20s} {v.value:.6g}  {v.detail}")
    _say(args, f"{sc.name}: {log.steps} steps in {log.wall_time:.1f} s, outputs in {out}")
    return EXIT_OK if summary["all_passed"] else EXIT_MONITOR


def cmd_check(args) -> int:
    try:
        _, sc = _load(args, ["backup.certify=false"])
    except (ConfigError, CertificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ok = True
    for name, cert in sc.certificates.items():
        ok &= bool(cert["passed"])
        extras = "  ".join(f"{k}={v:.6g}" for k, v in cert.items()
                           if k not in ("passed", "margin") and isinstance(v, float))
        margin = cert.get("margin")
        ms = f"margin={margin:.6g}" if margin is not None else ""
        print(f"{'PASS' if cert['passed'] else 'FAIL'}  {name:<24s} {ms}  {extras}".rstrip())
    return EXIT_OK if ok else EXIT_CONFIG


def _sweep_one(job):
    path, overrides, seed = job
    try:
        sc = build_scenario(apply_overrides(load_config(path), overrides), seed=seed)
    except (ConfigError, CertificationError) as exc:
        return {"error": str(exc)}
    return simulate(sc)[2]


def cmd_sweep(args) -> int:
    try:
        sec, key, _ = parse_override(f"{args.key}=0")
        values = [parse_override(f"{args.key}={v}")[2] for v in args.values]
        cfg = apply_overrides(load_config(args.scenario), args.set or ())
        apply_overrides(cfg, [f"{sec}.{key}={args.values[0]}"])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    jobs = [(args.scenario, list(args.set or ()) + [f"{sec}.{key}={raw}"], args.seed) for raw in args.values]
    workers = max(1, min(args.workers or os.cpu_count() or 1, len(jobs)))
    if workers == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    out = Path(args.out or "out/sweep")
    out.mkdir(parents=True, exist_ok=True)
    cols = ["value", "all_passed", "min_h", "min_h_b", "max_error_ratio", "max_abs_u", "fallback_count",
            "wall_time_s", "error"]
    status = EXIT_OK
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.key] + cols[1:])
        for v, res in zip(values, results):
            if "error" in res:
                status = EXIT_CONFIG
            elif not res["all_passed"] and status == EXIT_OK:
                status = EXIT_MONITOR
            row = [json.dumps(v)] + [res.get(c, "") for c in cols[1:]]
            w.writerow([fmt(x) if isinstance(x, float) else x for x in row])
            _say(args, f"{args.key}={json.dumps(v)}: "
                 + (f"error {res['error']}" if "error" in res else
                    f"{'PASS' if res['all_passed'] else 'FAIL'} min_h={res['min_h']:.4g}"))
    return status


def cmd_accept(args) -> int:
    from .acceptance import CRITERIA

    selected = [c for c in CRITERIA if not args.only or c.number in args.only]
    ok = True
    for crit in selected:
        res = crit.run()
        ok &= res.passed
        print(res.line())
    return EXIT_OK if ok else EXIT_MONITOR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obcbf", description="Output-feedback backup CBF simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("scenario", help="scenario file (bundled names such as spacecraft.toml also work)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, default=None, help="noise seed override")
        sp.add_argument("--quiet", action="store_true")
        if out:
            sp.add_argument("--out", metavar="DIR", default=None, help="output directory")

    common(sub.add_parser("run", help="simulate one scenario and write trajectory, margins and summary"))
    common(sub.add_parser("check", help="print certification inequalities with margins"), out=False)
    sw = sub.add_parser("sweep", help="run a scenario once per value of one config key")
    common(sw)
    sw.add_argument("--key", required=True, metavar="SECTION.KEY")
    sw.add_argument("--values", required=True, nargs="+")
    sw.add_argument("--workers", type=int, default=None)
    acc = sub.add_parser("accept", help="run the acceptance suite")
    acc.add_argument("--only", type=int, nargs="+", metavar="N", help="criterion numbers to run")
    acc.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "check": cmd_check, "sweep": cmd_sweep, "accept": cmd_accept}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
