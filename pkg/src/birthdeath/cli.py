"""Command-line front end.

Every command reads a model description, runs one solver and writes its
artifacts plus ``manifest.json`` into the output directory. The manifest
holds the fully resolved configuration, the model itself and the library
version, so ``birthdeath replay`` can rerun it.

Exit status: 0 on success, 2 for invalid input, 3 for numerical failure,
64 for command-line usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (ModelFamily, phase_transition_scan, scan_bifurcations, vanthoff_decompose,
                       write_events_jsonl)
from .asymptotics import build_potential, kramers_time, mfpt_asymptotic
from .diffusion import comparison_table
from .errors import DomainError, ModelError, NumericalError, ValidationError
from .exact import (Support, exact_potential, mfpt_backward_solve, mfpt_exact_left, mfpt_exact_right,
                    stationary_distribution)
from .model import (REFERENCE_MODELS, BirthDeathModel, Stability, build_expansion,
                    find_fixed_points, load_model)
from .simulate import default_threads, mc_mfpt, ssa_trajectory

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 2, 3, 64
COMMANDS = ("stationary", "potential", "mfpt", "simulate", "scan", "decompose",
            "diffusion-compare")
METHODS = ("exact", "asymptotic", "kramers", "mc")
BUILTIN_PREFIX = "builtin:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Argument parsing

def _range(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if count < 2 or not start < stop:
        raise argparse.ArgumentTypeError(f"need start < stop and count >= 2, got {text!r}")
    return start, stop, count


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(p) for p in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from exc
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"need lo < hi, got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="birthdeath", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def common(p, with_v=True):
        p.add_argument("--model", required=True,
                       help="model JSON file, or builtin:NAME for a reference model")
        if with_v:
            p.add_argument("--V", type=float, required=True, help="system size")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads; DGP_THREADS overrides this")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stationary", help="exact stationary distribution")
    common(p)
    p.add_argument("--n-max", type=int, default=None)

    p = sub.add_parser("potential", help="phi0 and phi1 on a grid")
    common(p, with_v=False)
    p.add_argument("--V", type=float, default=None, help="adds Phi = phi0 + phi1/V")
    p.add_argument("--x-max", type=float, required=True)
    p.add_argument("--points", type=int, default=201)

    p = sub.add_parser("mfpt", help="mean first passage times by several methods")
    common(p)
    start = p.add_mutually_exclusive_group(required=True)
    start.add_argument("--from-basin", choices=("lower", "upper"))
    start.add_argument("--from-state", type=int)
    p.add_argument("--to", required=True,
                   help="past-barrier, barrier, lower, upper, or a state number")
    p.add_argument("--methods", default="exact",
                   help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--replicas", type=int, default=1000)
    p.add_argument("--x-range", type=_interval, default=(0.0, 10.0),
                   help="window searched for fixed points (default 0:10)")
    p.add_argument("--time-budget", type=float, default=None,
                   help="wall-clock seconds allowed for Monte Carlo")

    p = sub.add_parser("simulate", help="one Gillespie trajectory")
    common(p)
    p.add_argument("--n0", type=int, required=True)
    stop = p.add_mutually_exclusive_group(required=True)
    stop.add_argument("--t-max", type=float)
    stop.add_argument("--hit", type=int)
    p.add_argument("--replica", type=int, default=0)

    p = sub.add_parser("scan", help="bifurcations and Maxwell points along a parameter")
    common(p, with_v=False)
    p.add_argument("--param", required=True, help="name of the model's scan parameter")
    p.add_argument("--range", dest="mu_range", type=_range, required=True,
                   help="start:stop:count")
    p.add_argument("--x-range", type=_interval, default=(0.0, 10.0))
    p.add_argument("--grid", type=int, default=2048, help="root-search grid size")

    p = sub.add_parser("decompose", help="split the exact potential by its V-dependence")
    common(p)
    p.add_argument("--x-grid", type=_range, required=True, help="start:stop:count")

    p = sub.add_parser("diffusion-compare", help="tabulate the diffusion approximations")
    common(p)
    p.add_argument("--x-grid", type=_range, required=True, help="start:stop:count")

    p = sub.add_parser("replay", help="rerun the configuration stored in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    return parser


# ---------------------------------------------------------------------------
# Helpers

def _resolve_model(spec: str) -> BirthDeathModel:
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        if name not in REFERENCE_MODELS:
            raise ModelError(f"unknown builtin model {name!r}; choose from "
                             + ", ".join(sorted(REFERENCE_MODELS)))
        return REFERENCE_MODELS[name]()
    try:
        return load_model(spec)
    except FileNotFoundError as exc:
        raise ModelError(f"model file not found: {spec}") from exc


class _Output:
    """Writes files strictly inside one directory."""

    def __init__(self, directory):
        self.root = Path(directory).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        target = (self.root / name).resolve()
        if target.parent != self.root:
            raise DomainError(f"refusing to write {name!r} outside {self.root}")
        self.files.append(name)
        return target

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])

    def json(self, name, data):
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _threads(flag):
    if os.environ.get("DGP_THREADS"):
        return default_threads()
    return flag if flag else default_threads()


def _grid(spec):
    start, stop, count = spec
    return np.linspace(start, stop, count)


# ---------------------------------------------------------------------------
# Commands

def cmd_stationary(model, cfg, out):
    dist = stationary_distribution(model, cfg["V"], n_max=cfg.get("n_max"))
    if dist.support is Support.FULL:
        phi = exact_potential(dist).phi
    else:
        phi = np.full(dist.n_max + 1, np.nan)
    out.csv("stationary.csv", ("n", "x", "log_p", "p", "Phi"),
            zip(dist.n, dist.x, dist.log_p, dist.p, phi))
    return {"n_max": dist.n_max, "support": dist.support.value, "tail_mass": dist.tail_mass,
            "mean": dist.mean()}


def cmd_potential(model, cfg, out):
    exp = build_expansion(model)
    grid = build_potential(exp, cfg["x_max"])
    xs = np.linspace(grid.x[0], cfg["x_max"], cfg["points"])
    phi0, phi1 = grid.phi0(xs), grid.phi1(xs)
    V = cfg.get("V")
    columns = [xs, phi0, phi1] + ([phi0 + phi1 / V] if V else [])
    header = ("x", "phi0", "phi1") + (("Phi_at_V",) if V else ())
    out.csv("potential.csv", header, zip(*columns))
    return {"quadrature": grid.metadata()}


def _fixed_points(exp, x_range):
    points = find_fixed_points(exp, *x_range)
    stable = [p.location for p in points if p.stability is Stability.STABLE]
    unstable = [p.location for p in points if p.stability is Stability.UNSTABLE]
    return points, stable, unstable


def _resolve_states(model, cfg):
    exp = build_expansion(model)
    V = cfg["V"]
    _, stable, unstable = _fixed_points(exp, tuple(cfg["x_range"]))
    if cfg.get("from_basin"):
        if not stable:
            raise DomainError("the drift has no stable fixed point in the search window")
        x_from = stable[0] if cfg["from_basin"] == "lower" else stable[-1]
    else:
        x_from = cfg["from_state"] / V
    target = cfg["to"]
    x_ddag = None
    if target in ("past-barrier", "barrier"):
        above = [x for x in unstable if x > x_from]
        below = [x for x in unstable if x < x_from]
        go_up = cfg.get("from_basin") == "lower" or (cfg.get("from_basin") is None and above)
        if go_up and above:
            x_ddag = min(above)
            beyond = [x for x in stable if x > x_ddag]
        elif not go_up and below:
            x_ddag = max(below)
            beyond = [x for x in stable if x < x_ddag]
        else:
            raise DomainError("no barrier on that side of the starting point")
        if target == "barrier":
            x_to = x_ddag
        elif not beyond:
            raise DomainError("no basin beyond the barrier")
        else:
            x_to = min(beyond) if go_up else max(beyond)
    elif target in ("lower", "upper"):
        if not stable:
            raise DomainError("the drift has no stable fixed point in the search window")
        x_to = stable[0] if target == "lower" else stable[-1]
    else:
        try:
            x_to = int(target) / V
        except ValueError as exc:
            raise DomainError(f"--to must be a selector or a state number, got {target!r}") from exc
    n_from, n_to = int(round(x_from * V)), int(round(x_to * V))
    if x_ddag is None:
        between = [x for x in unstable if min(x_from, x_to) < x < max(x_from, x_to)]
        x_ddag = between[0] if len(between) == 1 else None
    return exp, n_from, n_to, x_ddag


def cmd_mfpt(model, cfg, out):
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise DomainError(f"unknown methods {sorted(unknown)}; choose from {', '.join(METHODS)}")
    V = cfg["V"]
    exp, n_from, n_to, x_ddag = _resolve_states(model, cfg)
    upward = n_to >= n_from
    top = max(n_from, n_to, int(math.ceil(cfg["x_range"][1] * V)))
    report = {"n_from": n_from, "n_to": n_to, "x_from": n_from / V, "x_to": n_to / V,
              "x_barrier": x_ddag, "estimates": {}}
    est = report["estimates"]
    if "exact" in methods:
        if upward:
            value = mfpt_exact_right(model, V, n_from, n_to)
            oracle = mfpt_backward_solve(model, V, n_from, n_to)
            est["exact"] = {"time": value, "backward_solve": oracle,
                            "relative_difference": abs(value / oracle - 1) if oracle else 0.0}
        else:
            est["exact"] = {"time": mfpt_exact_left(model, V, n_from, n_to, top),
                            "reflecting_state": top}
    if "asymptotic" in methods:
        if upward:
            grid = build_potential(exp, max(n_to / V, n_from / V) * 1.05)
            est["asymptotic"] = {"time": mfpt_asymptotic(exp, grid, V, n_from / V, n_to / V)}
        else:
            est["asymptotic"] = {"skipped": "the integral formula covers upward passages only"}
    if "kramers" in methods:
        if x_ddag is None:
            est["kramers"] = {"skipped": "no single barrier between start and target"}
        else:
            k = kramers_time(exp, V, n_from / V, x_ddag)
            est["kramers"] = k.to_dict()
    if "mc" in methods:
        mc = mc_mfpt(model, V, n_from, n_to, cfg["replicas"], cfg["seed"],
                     threads=_threads(cfg.get("threads")), time_budget=cfg.get("time_budget"))
        est["mc"] = mc.to_dict()
    out.json("mfpt.json", report)
    return {"methods": methods}


def cmd_simulate(model, cfg, out):
    traj = ssa_trajectory(model, cfg["V"], cfg["n0"], t_max=cfg.get("t_max"),
                          hit_state=cfg.get("hit"), seed=cfg["seed"], replica=cfg.get("replica", 0))
    rows = [(0.0, traj.n0)] + list(zip(traj.times, traj.states))
    out.csv("trajectory.csv", ("t", "n"), rows)
    return {"events": len(traj), "absorbed": traj.absorbed,
            "final_time": float(traj.times[-1]) if len(traj) else 0.0}


def cmd_scan(model, cfg, out):
    if model.scan is None or model.scan.name != cfg["param"]:
        bound = model.scan.name if model.scan else None
        raise ModelError(f"model binds scan parameter {bound!r}, not {cfg['param']!r}")
    family = ModelFamily(model)
    mu = _grid(cfg["mu_range"])
    x_range = tuple(cfg["x_range"])
    events = scan_bifurcations(family, mu, x_range, cfg["grid"])
    diagram = phase_transition_scan(family, mu, x_range, cfg["grid"],
                                    threads=_threads(cfg.get("threads")))
    rows = [(r.mu, r.branch_id, r.x_min, r.phi0_min, r.is_global, "minimum") for r in diagram.rows]
    rows += [(t["mu"], t["to_branch"], t["x_to"], t["phi0_gap"], True, "maxwell")
             for t in diagram.transitions]
    out.csv("phase.csv", ("mu", "branch_id", "x_min", "phi0_min", "is_global", "row_type"), rows)
    records = [dict(e.to_dict(), record="bifurcation") for e in events]
    records += [dict(t, record="maxwell") for t in diagram.transitions]
    write_events_jsonl(_jsonable(records), out.path("events.jsonl"))
    return {"bifurcations": len(events), "maxwell_transitions": len(diagram.transitions)}


def cmd_decompose(model, cfg, out):
    V = cfg["V"]
    xs = np.rint(_grid(cfg["x_grid"]) * V) / V  # snap onto the lattice
    xs = np.unique(xs[xs * V >= 1])
    curves = vanthoff_decompose(model, V, xs)
    out.csv("vanthoff.csv", ("x", "phi0_tilde", "phi1_tilde", "phi"),
            zip(curves.x, curves.phi0_tilde, curves.phi1_tilde, curves.phi))
    residual = float(np.max(np.abs(curves.phi0_tilde + curves.phi1_tilde / V - curves.phi)))
    return {"points": len(xs), "max_identity_residual": residual}


def cmd_diffusion_compare(model, cfg, out):
    exp = build_expansion(model)
    table = comparison_table(exp, cfg["V"], _grid(cfg["x_grid"]))
    header = tuple(table)
    out.csv("diffusion.csv", header, zip(*(table[k] for k in header)))
    return {"points": len(table["x"])}


HANDLERS = {
    "stationary": cmd_stationary, "potential": cmd_potential, "mfpt": cmd_mfpt,
    "simulate": cmd_simulate, "scan": cmd_scan, "decompose": cmd_decompose,
    "diffusion-compare": cmd_diffusion_compare,
}


def run(config: dict, model: BirthDeathModel | None = None) -> int:
    """Execute a resolved configuration and write its manifest.

    Raises the library's exceptions; :func:`main` maps them to exit codes.
    """
    command = config["command"]
    if command not in HANDLERS:
        raise UsageError(f"unknown command {command!r}")
    if model is None:
        model = _resolve_model(config["model"])
    out = _Output(config["out"])
    summary = HANDLERS[command](model, config, out)
    manifest_path = out.path("manifest.json")
    out.files.remove("manifest.json")
    manifest = {"version": __version__, "command": command, "config": config,
                "model_definition": model.to_dict(), "outputs": list(out.files),
                "summary": summary}
    with open(manifest_path, "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _config_from_args(args) -> dict:
    config = {k: v for k, v in vars(args).items()}
    for key in ("x_range", "mu_range", "x_grid"):
        if config.get(key) is not None:
            config[key] = list(config[key])
    return config


def _replay(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    config = dict(manifest["config"])
    if args.out is not None:
        config["out"] = args.out
    model = BirthDeathModel.from_dict(manifest["model_definition"])
    return run(config, model)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "replay":
            return _replay(args)
        return run(_config_from_args(args))
    except UsageError as exc:
        print(f"birthdeath: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"birthdeath: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"birthdeath: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"birthdeath: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
