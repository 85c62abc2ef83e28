"""Config-driven command line entry point.

    fracml fode --config run.ini --out results/
    fracml sweep --config sweep.ini --out results/

Each subcommand reads its own INI section. Unknown sections and keys are
rejected before any computation. Every run writes ``manifest.json`` holding
the fully resolved configuration, which can be passed back as ``--config``
to reproduce the outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .analysis import DecayReport, ODE_CHECKPOINTS, PDE_CHECKPOINTS, write_decay_table
from .barriers import (BarrierError, barrier_pair, check_comparison, check_envelope,
                       check_inequality, fitted_constants, nonhomog_phi0_bound, suggest_tau,
                       write_audit_csv)
from .fode import FracmlError, FodeProblem, Source, solve
from .pde import PdeProblem, solve_pde
from .quadrature import (Scheme, estimate_decay_constants, make_weights, plateau_variation,
                         verify_cm_properties, write_weights_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
COMMANDS = ("fode", "pde", "barriers", "weights", "sweep")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


# -- value parsers: each takes the raw string and returns the typed value

def _number(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {raw!r}") from None


def _numbers(raw: str) -> list[float]:
    items = [s for s in (p.strip() for p in raw.split(",")) if s]
    if not items:
        raise ValueError("empty list")
    return [_number(s) for s in items]


def _integer(raw: str) -> int:
    v = _number(raw)
    if v != int(v):
        raise ValueError(f"not an integer: {raw!r}")
    return int(v)


def _scheme(raw: str) -> Scheme:
    return Scheme.parse(raw)


def _schemes(raw: str) -> list[Scheme]:
    return [Scheme.parse(s) for s in raw.split(",") if s.strip()]


def _engine(raw: str) -> str:
    raw = raw.strip().lower()
    if raw not in ("fast", "naive"):
        raise ValueError(f"expected 'fast' or 'naive', got {raw!r}")
    return raw


def _tau_or_auto(raw: str):
    return "auto" if raw.strip().lower() == "auto" else _number(raw)


def _word(raw: str) -> str:
    return raw.strip()


REQUIRED = object()

SCHEMAS: dict[str, dict[str, tuple[Callable, object]]] = {
    "fode": {
        "scheme": (_scheme, "gl"), "alpha": (_numbers, REQUIRED), "beta": (_numbers, REQUIRED),
        "gamma": (_numbers, "1"), "nu": (_number, "1"), "y0": (_number, "5"), "K": (_number, "0"),
        "tau": (_number, "0.1"), "horizon": (_number, "10000"), "lag": (_integer, "5"),
        "engine": (_engine, "fast"), "tail_fraction": (_number, "0.25"),
        "checkpoints": (_numbers, ",".join(f"{c:g}" for c in ODE_CHECKPOINTS)),
    },
    "pde": {
        "scheme": (_scheme, "gl"), "alpha": (_numbers, REQUIRED), "beta": (_numbers, REQUIRED),
        "nu": (_number, "1"), "amplitude": (_number, "10"), "source_scale": (_number, "1"), "tau": (_number, "0.1"),
        "horizon": (_number, "180"), "m": (_integer, "64"), "s": (_number, "2"),
        "rtol": (_number, "1e-10"), "max_iter": (_integer, "0"), "lag": (_integer, "5"),
        "tail_fraction": (_number, "0.25"),
        "checkpoints": (_numbers, ",".join(f"{c:g}" for c in PDE_CHECKPOINTS)),
    },
    "barriers": {
        "scheme": (_scheme, "gl"), "alpha": (_number, REQUIRED), "beta": (_number, REQUIRED),
        "gamma": (_number, "1"), "nu": (_number, "1"), "y0": (_number, "5"), "K": (_number, "0"),
        "tau": (_tau_or_auto, "auto"), "n_steps": (_integer, "10000"), "points": (_integer, "4"),
        "engine": (_engine, "fast"), "widen": (_number, "0.1"), "tol": (_number, "1e-12"),
    },
    "weights": {
        "scheme": (_schemes, "gl"), "alpha": (_numbers, REQUIRED), "n_max": (_integer, "10000"),
        "fit_lo": (_integer, "1"), "fit_hi": (_integer, "0"), "tol": (_number, "1e-13"),
        "plateau_lo": (_integer, "1000"), "plateau_tol": (_number, "0.1"),
    },
    "sweep": {
        "command": (_word, REQUIRED), "vary": (_word, REQUIRED), "values": (_word, REQUIRED),
    },
}


@dataclass
class RunConfig:
    """One resolved section: raw strings (for the manifest) and parsed values."""

    command: str
    raw: dict[str, str]
    values: dict[str, object]


def load_config(path, command: str, engine: str | None = None) -> RunConfig:
    cfg = _read_raw(Path(path))
    if command not in cfg:
        raise ConfigError(command, f"config has no [{command}] section")
    section = dict(cfg[command])
    if engine is not None and "engine" in SCHEMAS[command]:
        section["engine"] = engine
    raw, values = resolve_section(command, section)
    return RunConfig(command, raw, values)


def _read_raw(path: Path) -> dict[str, dict[str, str]]:
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid manifest JSON: {exc}") from None
        if "config" not in data:
            raise ConfigError("config", "manifest has no 'config' entry")
        return {sec: {k: str(v) for k, v in body.items()} for sec, body in data["config"].items()}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (K)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from None
    return {sec: dict(parser[sec]) for sec in parser.sections()}


def resolve_section(command: str, section: dict[str, str]) -> tuple[dict[str, str], dict[str, object]]:
    """Check keys, fill defaults and parse; returns (raw strings, typed values)."""
    schema = SCHEMAS[command]
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key in [{command}] (allowed: {', '.join(schema)})")
    raw, typed = {}, {}
    for key, (parse, default) in schema.items():
        if key in section:
            text = section[key]
        elif default is REQUIRED:
            raise ConfigError(key, f"missing required key in [{command}]")
        else:
            text = default
        try:
            typed[key] = parse(text)
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
        raw[key] = text.strip()
    _validate(command, typed)
    return raw, typed


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def _as_list(v) -> list:
    return v if isinstance(v, list) else [v]


def _validate(command: str, v: dict) -> None:
    if command == "sweep":
        _require(v["command"] in ("fode", "pde", "barriers", "weights"), "command",
                 f"sweep command must be fode, pde, barriers or weights, got {v['command']!r}")
        return
    for a in _as_list(v["alpha"]):
        _require(0.0 < a < 1.0, "alpha", f"must lie in (0, 1), got {a}")
    if command == "weights":
        _require(v["n_max"] >= 1, "n_max", "must be >= 1")
        _require(v["fit_lo"] >= 1, "fit_lo", "must be >= 1")
        hi = v["fit_hi"] or min(v["n_max"], 10000)
        _require(v["fit_lo"] <= hi <= v["n_max"], "fit_hi", f"fit range [{v['fit_lo']}, {hi}] "
                 f"must lie within [1, {v['n_max']}]")
        _require(v["tol"] > 0, "tol", "must be positive")
        return
    alphas, betas = _as_list(v["alpha"]), _as_list(v["beta"])
    for p in _broadcast({"alpha": alphas, "beta": betas}):
        _require(p["beta"] > -p["alpha"], "beta", f"must exceed -alpha, got beta={p['beta']} "
                 f"with alpha={p['alpha']}")
    _require(v["nu"] > 0, "nu", f"must be positive, got {v['nu']}")
    if command in ("fode", "barriers"):
        for g in _as_list(v["gamma"]):
            _require(g > 0, "gamma", f"must be positive, got {g}")
        _require(v["y0"] > 0, "y0", f"must be positive, got {v['y0']}")
        _require(v["K"] >= 0, "K", f"must be nonnegative, got {v['K']}")
    if command == "barriers":
        _require(v["tau"] == "auto" or v["tau"] > 0, "tau", "must be positive or 'auto'")
        _require(v["n_steps"] >= 1, "n_steps", "must be >= 1")
        _require(v["points"] >= 1, "points", "must be >= 1")
        _require(0 <= v["widen"] < 1, "widen", "must lie in [0, 1)")
        return
    _require(v["tau"] > 0, "tau", f"must be positive, got {v['tau']}")
    n = v["horizon"] / v["tau"]
    _require(v["horizon"] > 0 and abs(n - round(n)) <= 1e-9 * max(1.0, n), "horizon",
             f"must be a positive multiple of tau, got {v['horizon']} with tau={v['tau']}")
    _require(v["lag"] >= 1, "lag", "must be >= 1")
    _require(0 < v["tail_fraction"] <= 1, "tail_fraction", "must lie in (0, 1]")
    if command == "pde":
        _require(v["m"] >= 2, "m", f"must be >= 2, got {v['m']}")
        _require(v["s"] > 1 and math.isfinite(v["s"]), "s", f"must lie in (1, inf), got {v['s']}")
        _require(v["amplitude"] >= 0, "amplitude", "must be nonnegative")
        _require(v["source_scale"] >= 0, "source_scale", "must be nonnegative")
        _require(v["rtol"] > 0, "rtol", "must be positive")
        _require(v["max_iter"] >= 0, "max_iter", "must be >= 0 (0 selects 10 m)")


def _broadcast(lists: dict[str, list]) -> list[dict]:
    """Zip equal-length parameter lists; length-1 lists are repeated."""
    n = max(len(x) for x in lists.values())
    for key, x in lists.items():
        _require(len(x) in (1, n), key, f"has {len(x)} values; expected 1 or {n}")
    return [{k: (x[0] if len(x) == 1 else x[i]) for k, x in lists.items()} for i in range(n)]


def _labels(raw: dict[str, str], keys: list[str]) -> list[str]:
    toks = {k: [s.strip() for s in raw[k].split(",") if s.strip()] for k in keys}
    n = max(len(t) for t in toks.values())
    varying = [k for k in keys if len(toks[k]) > 1] or keys[:1]
    return [",".join(f"{k}={toks[k][i if len(toks[k]) > 1 else 0]}" for k in varying)
            for i in range(n)]


def _n_steps(v: dict) -> int:
    return int(round(v["horizon"] / v["tau"]))


def _slug(label: str) -> str:
    return label.replace("=", "_").replace(",", "__").replace("/", "over")


# -- commands: each returns (status, summary dict) and writes into out

def run_fode(raw: dict, v: dict, out: Path) -> tuple[int, dict]:
    keys = ["alpha", "beta", "gamma"]
    runs = _broadcast({k: _as_list(v[k]) for k in keys})
    labels = _labels(raw, keys)
    n_steps = _n_steps(v)
    source = Source.decay(v["K"]) if v["K"] > 0 else Source.zero()
    reports, constants = [], {}
    for label, p in zip(labels, runs):
        problem = FodeProblem(p["alpha"], p["beta"], p["gamma"], v["nu"], v["y0"], source)
        table = make_weights(v["scheme"], p["alpha"], n_steps)
        traj = solve(problem, table, v["tau"], n_steps, engine=v["engine"])
        traj.to_csv(out / f"trajectory_{_slug(label)}.csv")
        reports.append(DecayReport.from_series(traj.values, traj.times, v["lag"], v["tail_fraction"],
                                               label, problem.rate))
        d = fitted_constants(table)
        constants[label] = {"c3": d.c3, "c4": d.c4, "fit_range": list(d.n_fit_range)}
    write_decay_table(out / "decay_table.csv", reports, v["checkpoints"])
    return EXIT_OK, {"decay_constants": constants,
                     "final_index": {r.label: r.final_index for r in reports},
                     "fitted_rate": {r.label: r.fitted_rate for r in reports}}


def run_pde(raw: dict, v: dict, out: Path) -> tuple[int, dict]:
    keys = ["alpha", "beta"]
    runs = _broadcast({k: _as_list(v[k]) for k in keys})
    labels = _labels(raw, keys)
    n_steps = _n_steps(v)
    reports, summary = [], {}
    for label, p in zip(labels, runs):
        problem = PdeProblem(p["alpha"], p["beta"], v["nu"], v["amplitude"], v["source_scale"])
        res = solve_pde(problem, v["scheme"], v["tau"], n_steps, v["s"], v["m"], rtol=v["rtol"],
                        max_iter=v["max_iter"] or None, keep_final=False)
        res.to_csv(out / f"norms_{_slug(label)}.csv")
        reports.append(DecayReport.from_series(res.norms, res.times, v["lag"], v["tail_fraction"],
                                               label, problem.rate))
        ineq = res.inequality
        summary[label] = {"max_cg_iterations": int(res.iterations.max()),
                          "min_nodal_value": float(res.min_value.min()),
                          "norm_inequality_passed": ineq.passed,
                          "norm_inequality_min_slack": float(ineq.normalized_slack.min())}
    write_decay_table(out / "decay_table.csv", reports, v["checkpoints"])
    return EXIT_OK, {"runs": summary,
                     "final_index": {r.label: r.final_index for r in reports}}


def run_barriers(raw: dict, v: dict, out: Path) -> tuple[int, dict]:
    n = v["n_steps"]
    source = Source.decay(v["K"]) if v["K"] > 0 else Source.zero()
    problem = FodeProblem(v["alpha"], v["beta"], v["gamma"], v["nu"], v["y0"], source)
    table = make_weights(v["scheme"], v["alpha"], n)
    decay = fitted_constants(table, widen=v["widen"])
    if v["K"] > 0:
        bound = nonhomog_phi0_bound(problem, decay)
        _require(v["y0"] >= bound, "y0", f"must be >= {bound:.6g} for source bound K={v['K']}")
    tau = suggest_tau(problem, decay, v["points"]) if v["tau"] == "auto" else v["tau"]
    try:
        sub, sup = barrier_pair(problem, table, tau, decay)
    except BarrierError as exc:
        raise ConfigError("tau", str(exc)) from None
    traj = solve(problem, table, tau, n, engine=v["engine"])
    lo, hi = sub.values(n), sup.values(n)
    cmp_ = check_comparison(lo, traj.values, hi)
    ineq_sub = check_inequality(sub, table, n, tol=v["tol"])
    ineq_sup = check_inequality(sup, table, n, tol=v["tol"])
    env = check_envelope(traj.values, tau, problem.rate, sub.envelope_constant, sup.envelope_constant)
    write_audit_csv(out / "barrier_audit.csv", tau, lo, traj.values, hi)
    ok = cmp_.passed and ineq_sub.passed and ineq_sup.passed and env == 0
    return (EXIT_OK if ok else EXIT_CHECK), {
        "tau": tau, "c3": decay.c3, "c4": decay.c4, "fit_range": list(decay.n_fit_range),
        "sub": {k: _jsonable(x) for k, x in sub.constants.items()},
        "sup": {k: _jsonable(x) for k, x in sup.constants.items()},
        "C5": sub.envelope_constant, "C6": sup.envelope_constant,
        "comparison_violations": cmp_.violations,
        "sub_inequality_passed": ineq_sub.passed, "sup_inequality_passed": ineq_sup.passed,
        "envelope_violations": env, "passed": ok}


def run_weights(raw: dict, v: dict, out: Path) -> tuple[int, dict]:
    rows, summary, ok = [], {}, True
    for scheme in v["scheme"]:
        for a in v["alpha"]:
            table = make_weights(scheme, a, v["n_max"])
            tag = f"{scheme.value}_alpha_{a:g}"
            write_weights_csv(table, out / f"weights_{tag}.csv")
            rep = verify_cm_properties(table, tol=v["tol"])
            hi = v["fit_hi"] or min(v["n_max"], 10000)
            d = estimate_decay_constants(table, (v["fit_lo"], hi))
            for name, status, detail in rep.rows():
                rows.append([scheme.value, f"{a:g}", name, status, detail])
            entry = {"c3": d.c3, "c4": d.c4, "fit_range": [v["fit_lo"], hi], "passed": rep.passed}
            if v["plateau_lo"] < v["n_max"]:
                var = plateau_variation(table, v["plateau_lo"], v["n_max"])
                flat = all(x <= v["plateau_tol"] for x in var.values())
                detail = ", ".join(f"{k}={x:.3e}" for k, x in var.items())
                rows.append([scheme.value, f"{a:g}", "plateau", "pass" if flat else "fail", detail])
                entry["plateau_variation"] = var
                entry["passed"] = entry["passed"] and flat
            ok = ok and entry["passed"]
            summary[tag] = entry
    with (out / "certification.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "alpha", "check", "status", "detail"])
        w.writerows(rows)
    return (EXIT_OK if ok else EXIT_CHECK), {"tables": summary, "passed": ok}


RUNNERS = {"fode": run_fode, "pde": run_pde, "barriers": run_barriers, "weights": run_weights}


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, raw: dict, summary: dict, status: int,
                    wall: float) -> None:
    outputs = {p.name: _digest(p) for p in sorted(out.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    manifest = {"command": command, "version": __version__, "config": {command: raw},
                "status": status, "wall_time_s": wall, "summary": summary, "outputs": outputs}
    with (out / "manifest.json").open("w", newline="") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def execute(command: str, section: dict[str, str], out: Path,
            engine: str | None = None) -> tuple[int, dict]:
    """Validate, run and write a manifest for one non-sweep command."""
    section = dict(section)
    if engine is not None and "engine" in SCHEMAS[command]:
        section["engine"] = engine
    raw, typed = resolve_section(command, section)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    status, summary = RUNNERS[command](raw, typed, out)
    _write_manifest(out, command, raw, summary, status, time.perf_counter() - start)
    return status, summary


def run_sweep(raw_cfg: dict, out: Path, engine: str | None) -> int:
    _, sw = resolve_section("sweep", raw_cfg.get("sweep", {}))
    cmd = sw["command"]
    _require(cmd in raw_cfg, cmd, f"sweep needs a [{cmd}] base section")
    values = [s.strip() for s in sw["values"].split(",") if s.strip()]
    _require(bool(values), "values", "empty list")
    _require(sw["vary"] in SCHEMAS[cmd], "vary", f"{sw['vary']!r} is not a key of [{cmd}]")
    jobs = []
    for val in values:
        section = dict(raw_cfg[cmd])
        section[sw["vary"]] = val
        sub_out = out / _slug(f"{sw['vary']}={val}")
        if engine is not None and "engine" in SCHEMAS[cmd]:
            section["engine"] = engine
        resolve_section(cmd, section)  # fail before any run starts
        jobs.append((val, section, sub_out))
    threads = _thread_cap(len(jobs))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda j: execute(cmd, j[1], j[2], engine), jobs))
    statuses = {val: st for (val, _, _), (st, _) in zip(jobs, results)}
    out.mkdir(parents=True, exist_ok=True)
    with (out / "manifest.json").open("w", newline="") as fh:
        json.dump({"command": "sweep", "version": __version__,
                   "config": {"sweep": {"command": cmd, "vary": sw["vary"], "values": sw["values"]},
                              cmd: raw_cfg[cmd]},
                   "threads": threads, "status": statuses}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return max(statuses.values(), default=EXIT_OK)


def _thread_cap(n_jobs: int) -> int:
    env = os.environ.get("FRACML_THREADS")
    if env is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError("FRACML_THREADS", f"not an integer: {env!r}") from None
        _require(cap >= 1, "FRACML_THREADS", f"must be >= 1, got {cap}")
    return max(1, min(cap, n_jobs))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracml", description="CM-preserving fractional decay experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="INI file or manifest.json")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--engine", choices=("naive", "fast"), default=None,
                       help="history convolution engine (overrides the config)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _read_raw(args.config)
        unknown = sorted(set(cfg) - set(SCHEMAS))
        if unknown:
            raise ConfigError(unknown[0], f"unknown section (allowed: {', '.join(SCHEMAS)})")
        if args.command == "sweep":
            status = run_sweep(cfg, args.out, args.engine)
        else:
            if args.command not in cfg:
                raise ConfigError(args.command, f"config has no [{args.command}] section")
            status, _ = execute(args.command, cfg[args.command], args.out, args.engine)
    except ConfigError as exc:
        print(f"fracml: invalid configuration: key '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FracmlError as exc:
        print(f"fracml: numerical failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"fracml: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if status == EXIT_CHECK:
        print("fracml: one or more checks failed; see manifest.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
