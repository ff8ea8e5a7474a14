"""Command-line front end: ``regjacobi {bounds,solve,compare,ev-sim}``.

Settings come from an optional JSON ``--config`` file; command-line flags
override it.  Exit status is 0 on success, 1 when a run hits its iteration
cap (artifacts are still written), 2 on configuration errors and 3 on
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from regjacobi.diagnostics import solve_centralized
from regjacobi.errors import InfeasibleSetError, InvalidArgumentError, NumericalFailure
from regjacobi.ev import (assemble_ev, fleet_scenario, iterations_table, profile_to_csv, run_ev,
                          scenario_from_dict, valley_report)
from regjacobi.iteration import (IterationConfig, fixed_point_residual, initial_point, run,
                                 trace_to_csv)
from regjacobi.problem import problem_from_dict
from regjacobi.spectral import compute_bounds, pick_c, threshold

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
DEFAULTS = {"c_policy": "thm1", "margin": 0.01, "method": "jacobi", "max_iter": 10_000,
            "tol": 1e-9, "out": ".", "seed": 0, "c_grid": [1.0, 1.35, 2.7], "m": 100}
KEYS = ("input", "c", "c_policy", "margin", "method", "max_iter", "tol", "out", "seed", "c_grid",
        "L", "m")


class ConfigError(Exception):
    pass


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings")
    src = common.add_mutually_exclusive_group()
    src.add_argument("--c", type=float, help="regularization coefficient")
    src.add_argument("--c-policy", choices=("thm1", "thm3", "eq38", "grad"))
    common.add_argument("--margin", type=float, help="relative margin above the threshold")
    common.add_argument("--method", choices=("jacobi", "gradient"))
    common.add_argument("--max-iter", type=int)
    common.add_argument("--tol", type=float, help="step-norm stopping tolerance")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--L", type=float, help="gradient Lipschitz constant (eq38 policy)")

    parser = argparse.ArgumentParser(prog="regjacobi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("bounds", parents=[common], help="eigenvalue bounds and thresholds")
    p.add_argument("input", nargs="?", help="problem or scenario JSON")
    p = sub.add_parser("solve", parents=[common], help="run one method and compare to the oracle")
    p.add_argument("input", nargs="?")
    p = sub.add_parser("compare", parents=[common], help="Jacobi vs gradient, and a c-grid table")
    p.add_argument("input", nargs="?")
    p.add_argument("--c-grid", type=_float_list, help="comma-separated multiples of the threshold")
    p = sub.add_parser("ev-sim", parents=[common], help="PEV fleet charging simulation")
    p.add_argument("input", nargs="?", help="scenario JSON (default: synthetic fleet)")
    p.add_argument("--m", type=int, help="fleet size of the synthetic scenario")
    return parser


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def resolve_settings(args):
    """Merge defaults, the config file and flags (flags win)."""
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "c" in cfg and "c_policy" in cfg:
            raise ConfigError("give either c or c_policy, not both")
        if "input" in cfg and not os.path.isabs(cfg["input"]):
            cfg["input"] = os.path.join(os.path.dirname(os.path.abspath(args.config)), cfg["input"])
    flags = {k: getattr(args, k) for k in KEYS if getattr(args, k, None) is not None}
    if "c" in flags:
        cfg.pop("c_policy", None)
    if "c_policy" in flags:
        cfg.pop("c", None)
    settings = {**DEFAULTS, **cfg, **flags}
    if "c" in settings:
        settings.pop("c_policy")
        if not settings["c"] >= 0:
            raise ConfigError("c must be nonnegative")
    if settings["method"] not in ("jacobi", "gradient"):
        raise ConfigError(f"unknown method {settings['method']!r}")
    return settings


def _load_input(path, seed):
    """``("problem", obj, sets)`` or ``("scenario", scenario, None)``."""
    if path is None:
        raise ConfigError("an input file is required")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if isinstance(data, dict) and "n_i" in data:
        obj, sets = problem_from_dict(data)
        if sets is None:
            raise ConfigError(f"{path} has no 'sets' entry")
        return "problem", obj, sets
    if isinstance(data, dict) and "horizon" in data:
        gamma = data.get("gamma")
        if isinstance(gamma, dict) and "seed" not in gamma:
            data = {**data, "gamma": {**gamma, "seed": seed}}
        base = os.path.dirname(os.path.abspath(path))
        return "scenario", scenario_from_dict(data, base_dir=base), None
    raise ConfigError(f"{path} is neither a problem nor a scenario file")


def _choose_c(settings, bounds, method):
    if "c" in settings:
        return float(settings["c"])
    policy = "grad" if method == "gradient" else settings["c_policy"]
    return pick_c(bounds, policy, settings["margin"])


def _write(out, name, text):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config(settings, c, method, **kw):
    return IterationConfig(c=c, method=method, max_iter=int(settings["max_iter"]),
                           tol_step=float(settings["tol"]), **kw)


def cmd_bounds(settings):
    kind, obj, _ = _load_input(settings.get("input"), settings["seed"])
    if kind == "scenario":
        obj, _ = assemble_ev(obj)
    bounds = compute_bounds(obj, L=settings.get("L"))
    text = json.dumps(bounds.to_dict(12), sort_keys=True)
    print(text)
    _write(settings["out"], "bounds.json", text + "\n")
    return EXIT_OK


def _problem(settings):
    kind, obj, sets = _load_input(settings.get("input"), settings["seed"])
    if kind == "scenario":
        obj, sets = assemble_ev(obj)
    return obj, sets


def cmd_solve(settings):
    obj, sets = _problem(settings)
    method = settings["method"]
    bounds = compute_bounds(obj, L=settings.get("L"))
    c = _choose_c(settings, bounds, method)
    out = settings["out"]
    try:
        trace = run(obj, sets, _config(settings, c, method))
    except NumericalFailure as exc:
        if getattr(exc, "trace", None) is not None:
            _write(out, "trace.csv", trace_to_csv(exc.trace))
        raise
    _write(out, "trace.csv", trace_to_csv(trace))
    x_star, f_star = solve_centralized(obj, sets)
    f = obj.value(trace.x)
    _write(out, "x.json", _dump({"x": trace.x.tolist(), "f": f, "c": c, "method": method,
                                 "converged": trace.converged, "iterations": trace.iterations}))
    report = {"f": f, "f_star": f_star, "abs_gap": f - f_star,
              "rel_gap": (f - f_star) / max(abs(f_star), 1e-300) if f_star else f - f_star,
              "fixed_point_residual": fixed_point_residual(obj, sets, trace.x, c) if c > 0 else None}
    _write(out, "oracle.json", _dump(report))
    print(f"{method}: c={c:.12g} iterations={trace.iterations} converged={trace.converged} "
          f"f={f:.12g} f*={f_star:.12g}")
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def _grid_rows(obj, sets, thr, grid, f_star, settings):
    x0 = initial_point(obj.partition, sets)
    rows = []
    for mult in grid:
        c = mult * thr
        cfg = _config(settings, c, "jacobi", objective_target=f_star + 1e-6 * abs(f_star))
        k = run(obj, sets, cfg, x0=x0).iterations_to(f_star, 1e-6)
        rows.append((c, k, k is not None))
    return rows


def cmd_compare(settings):
    kind, data, sets = _load_input(settings.get("input"), settings["seed"])
    if kind == "scenario":
        scenario = data
        obj, sets = assemble_ev(scenario)
    else:
        obj = data
    bounds = compute_bounds(obj, L=settings.get("L"))
    out = settings["out"]
    x0 = initial_point(obj.partition, sets)
    _, f_star = solve_centralized(obj, sets)
    status = EXIT_OK
    summary = {"f_star": f_star}
    for method in ("jacobi", "gradient"):
        c = _choose_c(settings, bounds, method)
        trace = run(obj, sets, _config(settings, c, method), x0=x0)
        _write(out, f"trace_{method}.csv", trace_to_csv(trace))
        summary[method] = {"c": c, "iterations": trace.iterations, "converged": trace.converged,
                           "iterations_to_1e-6": trace.iterations_to(f_star, 1e-6)}
        if not trace.converged:
            status = EXIT_NOT_CONVERGED
        print(f"{method}: c={c:.12g} iterations={trace.iterations} converged={trace.converged}")
    thr = threshold(bounds, settings.get("c_policy", "thm3") if "c" not in settings else "thm3")
    grid = settings["c_grid"]
    if kind == "scenario":
        rows = iterations_table(scenario, [g * thr for g in grid], f_star,
                                max_iter=int(settings["max_iter"]))
    else:
        rows = _grid_rows(obj, sets, thr, grid, f_star, settings)
    lines = ["c,iterations,converged"]
    for c, k, ok in rows:
        lines.append(f"{c:.17g},{'' if k is None else k},{int(ok)}")
    _write(out, "c_grid.csv", "\n".join(lines) + "\n")
    _write(out, "compare.json", _dump(summary))
    print("\n".join(lines))
    return status


def cmd_ev_sim(settings):
    if settings.get("input"):
        kind, scenario, _ = _load_input(settings["input"], settings["seed"])
        if kind != "scenario":
            raise ConfigError("ev-sim needs a scenario file")
    else:
        scenario = fleet_scenario(m=int(settings["m"]), seed=int(settings["seed"]))
    if settings["method"] != "jacobi":
        raise ConfigError("ev-sim runs the aggregate Jacobi method only")
    obj, sets = assemble_ev(scenario)
    bounds = compute_bounds(obj)
    c = _choose_c(settings, bounds, "jacobi")
    out = settings["out"]
    trace = run_ev(scenario, _config(settings, c, "jacobi"))
    _write(out, "trace.csv", trace_to_csv(trace))
    report = valley_report(scenario, trace.x)
    _write(out, "profile.csv", profile_to_csv(report))
    _, f_star = solve_centralized(obj, sets)
    f = obj.value(trace.x)
    report.update({"c": c, "f": f, "f_star": f_star, "rel_gap": (f - f_star) / abs(f_star),
                   "converged": trace.converged, "iterations": trace.iterations,
                   "lambda_qz_max": bounds.lambda_qz_max, "c_thm3": bounds.c_thm3})
    _write(out, "valley.json", _dump(report))
    print(f"ev-sim: m={scenario.m} c={c:.12g} iterations={trace.iterations} "
          f"converged={trace.converged} f={f:.12g} f*={f_star:.12g} flatness={report['flatness']:.6g}")
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


COMMANDS = {"bounds": cmd_bounds, "solve": cmd_solve, "compare": cmd_compare, "ev-sim": cmd_ev_sim}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except (ConfigError, InvalidArgumentError, InfeasibleSetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
