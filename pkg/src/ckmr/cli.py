"""Command-line interface: ``ckmr fit``, ``ckmr simulate`` and ``ckmr summarize``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import types
import typing
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_dataset, load_grouping
from .draws import DrawFileError, PosteriorDraws
from .kernel import KnotConfigError, NumericalError, default_n_knots, select_knots
from .model import MODES, ConfigError, HyperParameters
from .sampler import ChainAbort, ChainConfig, run_chain
from .simulation import ScenarioError, ScenarioSpec, run_benchmark
from .splines import DegenerateIndexError, SplineConfigError, build_spline_system
from .summaries import SummaryError, write_summaries

log = logging.getLogger("ckmr")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

INPUT_ERRORS = (DataError, ConfigError, DrawFileError, ScenarioError, SplineConfigError, DegenerateIndexError,
                KnotConfigError, SummaryError, FileNotFoundError, ValueError)
NUMERICAL_ERRORS = (ChainAbort, NumericalError, ArithmeticError)

# defaults for options that may also come from a config file
FIT_DEFAULTS = {
    "confounders": "",
    "mode": "ckmr",
    "iters": 10000,
    "burnin": 5000,
    "thin": 5,
    "chains": 2,
    "seed": 0,
    "knots": None,
    "df": 9,
    "max_pairs": 10,
}
SIM_DEFAULTS = {
    "scenario": "A",
    "reps": 50,
    "n": 200,
    "sigma2": 1.0,
    "modes": "ckmr,kernel-only",
    "seed": 0,
    "iters": 10000,
    "burnin": 5000,
    "thin": 5,
    "chains": 2,
}


class InputError(ValueError):
    pass


def _default_threads():
    return os.cpu_count() or 1


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    return cfg


def _resolve(args, cfg, defaults):
    """Command line beats config file beats defaults."""
    out = {}
    for key, default in defaults.items():
        v = getattr(args, key, None)
        if v is None:
            v = cfg.get(key, default)
        out[key] = v
    return out


def _coerce(name, text, typ):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        inner = [t for t in typing.get_args(typ) if t is not type(None)]
        if isinstance(text, str) and text.lower() in ("none", "null"):
            return None
        return _coerce(name, text, inner[0])
    if typ in (bool, "bool"):
        if isinstance(text, bool):
            return text
        low = str(text).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InputError(f"{name}: expected a boolean, got {text!r}")
    if typ in (int, "int"):
        try:
            return int(text)
        except (TypeError, ValueError):
            raise InputError(f"{name}: expected an integer, got {text!r}") from None
    if typ in (float, "float"):
        try:
            return float(text)
        except (TypeError, ValueError):
            raise InputError(f"{name}: expected a number, got {text!r}") from None
    return str(text)


def hyper_overrides(pairs, cfg_hyper=None):
    """Type-check ``key=value`` overrides (config values first, then the command line)."""
    hints = typing.get_type_hints(HyperParameters)
    out = {}
    items = list((cfg_hyper or {}).items())
    for p in pairs or []:
        if "=" not in p:
            raise InputError(f"override {p!r} must look like key=value")
        k, v = p.split("=", 1)
        items.append((k.strip(), v.strip()))
    for k, v in items:
        if k not in hints:
            raise InputError(f"unknown hyperparameter {k!r}")
        out[k] = _coerce(k, v, hints[k])
    return out


def _chain_config(opts, threads):
    try:
        return ChainConfig(iterations=int(opts["iters"]), burn_in=int(opts["burnin"]), thin=int(opts["thin"]),
                           seed=int(opts["seed"]), chain_count=int(opts["chains"]), threads=threads)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _make_hyper(overrides, **fixed):
    try:
        return HyperParameters(**{**overrides, **fixed})
    except TypeError as exc:
        raise InputError(str(exc)) from None


def _split(text):
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


# --- fit ---------------------------------------------------------------------------------


def _prepare_fit(run):
    grouping = load_grouping(run["groups"])
    ds = load_dataset(run["data"], grouping, run["outcome"], run["confounders"])
    hyper = HyperParameters(**run["hyperparameters"])
    sp = build_spline_system(ds, hyper.df) if hyper.mode != "kernel-only" else None
    n_knots = hyper.n_knots or default_n_knots(ds.n)
    kn = select_knots(ds, n_knots, seed=run["knot_seed"])
    return ds, hyper, sp, kn


def cmd_fit(args):
    cfg = _load_config(args.config)
    opts = _resolve(args, cfg, FIT_DEFAULTS)
    for req in ("data", "groups", "outcome", "out"):
        if getattr(args, req, None) is None and req not in cfg:
            raise InputError(f"missing required option --{req}")
    data = args.data or cfg["data"]
    groups = args.groups or cfg["groups"]
    outcome = args.outcome or cfg["outcome"]
    out = Path(args.out or cfg["out"])
    if opts["mode"] not in MODES:
        raise InputError(f"--mode must be one of {MODES}")
    threads = args.threads or cfg.get("threads") or _default_threads()
    overrides = hyper_overrides(args.set, cfg.get("hyper"))
    fixed = {"mode": opts["mode"], "df": int(opts["df"])}
    if opts["knots"] is not None:
        fixed["n_knots"] = int(opts["knots"])
    hyper = _make_hyper(overrides, **fixed)
    config = _chain_config(opts, threads)

    run = {
        "code_version": __version__,
        "command": "fit",
        "data": str(data),
        "groups": str(groups),
        "outcome": outcome,
        "confounders": _split(opts["confounders"]),
        "hyperparameters": hyper.to_dict(),
        "chain_config": asdict(config),
        "seed": int(opts["seed"]),
        "knot_seed": int(opts["seed"]),
        "chain_seeds": [[int(opts["seed"]), c] for c in range(config.chain_count)],
        "max_pairs": int(opts["max_pairs"]),
    }
    ds, hyper, sp, kn = _prepare_fit(run)
    run["n"] = ds.n
    run["group_names"] = ds.group_names
    run["component_names"] = ds.component_names
    run["confounder_names"] = ds.confounder_names
    run["n_knots"] = kn.n_knots
    run["scaling"] = {k: list(v) for k, v in ds.scaling.items()}
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    draws = run_chain(ds, sp, kn, hyper, config)
    run["runtime_seconds"] = time.perf_counter() - t0
    run["diagnostics"] = draws.diagnostics
    files = []
    for c in range(config.chain_count):
        name = f"draws_chain{c + 1}.csv"
        draws.write_csv(out / name, chain=c)
        files.append(name)
    run["draw_files"] = files
    with (out / "run.json").open("w", encoding="utf-8") as fh:
        json.dump(_jsonable(run), fh, indent=2, sort_keys=True)
        fh.write("\n")
    # summaries are built from the files just written so `summarize` reproduces them exactly
    return _summarize_dir(out, out, plot=args.plot)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _summarize_dir(fit_dir, out_dir, plot=False, data=None, groups=None):
    fit_dir = Path(fit_dir)
    run_path = fit_dir / "run.json"
    if not run_path.exists():
        raise InputError(f"{run_path} not found; is this a fit output directory?")
    with run_path.open(encoding="utf-8") as fh:
        run = json.load(fh)
    if data is not None:
        run["data"] = str(data)
    if groups is not None:
        run["groups"] = str(groups)
    parts = []
    missing = []
    for c, name in enumerate(run["draw_files"]):
        p = fit_dir / name
        if p.exists():
            parts.append(PosteriorDraws.read_csv(p, chain=c))
        else:
            missing.append(name)
    if not parts:
        raise DrawFileError(f"no draw files found in {fit_dir}")
    if missing:
        warnings.warn(f"missing draw files {missing}; summarizing the remaining chains", stacklevel=2)
    draws = PosteriorDraws.concat(parts)
    ds, hyper, sp, kn = _prepare_fit(run)
    write_summaries(out_dir, draws, ds, sp, kn, hyper.mode, meta=run, seed=run["seed"],
                    max_pairs=run.get("max_pairs", 10), plot=plot)
    return EXIT_OK


def cmd_summarize(args):
    out = args.out or args.fit_dir
    return _summarize_dir(args.fit_dir, out, plot=args.plot, data=args.data, groups=args.groups)


# --- simulate ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = _load_config(args.config)
    opts = _resolve(args, cfg, SIM_DEFAULTS)
    out = args.out or cfg.get("out")
    if out is None:
        raise InputError("missing required option --out")
    modes = _split(opts["modes"])
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise InputError(f"--modes must be a comma list drawn from {MODES}")
    try:
        spec = ScenarioSpec(scenario=str(opts["scenario"]), n=int(opts["n"]), sigma2=float(opts["sigma2"]),
                            seed=int(opts["seed"]), reps=int(opts["reps"]))
    except ScenarioError as exc:
        raise InputError(str(exc)) from None
    threads = args.threads or cfg.get("threads") or _default_threads()
    hyper = _make_hyper(hyper_overrides(args.set, cfg.get("hyper")))
    config = _chain_config(opts, 1)

    def progress(row):
        log.info("scenario %s replicate %d %s: mse=%.3f coverage=%.3f (%.0fs)", row["scenario"], row["replicate"],
                 row["mode"], row["mse"], row["coverage"], row["runtime"])

    run_benchmark(spec, modes, config, hyper, out_dir=out, threads=threads, progress=progress)
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------


def _chain_args(p):
    p.add_argument("--iters", type=int, help="MCMC iterations per chain (default 10000)")
    p.add_argument("--burnin", type=int, help="burn-in iterations (default 5000)")
    p.add_argument("--thin", type=int, help="thinning interval (default 5)")
    p.add_argument("--chains", type=int, help="number of chains (default 2)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    p.add_argument("--config", help="JSON file with option defaults (flags take precedence)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="hyperparameter override, repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="ckmr", description="Collapsible kernel machine regression")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a CSV data set")
    f.add_argument("--data", help="CSV with outcome, exposures and confounders")
    f.add_argument("--groups", help="CSV with columns component,group")
    f.add_argument("--outcome", help="outcome column")
    f.add_argument("--confounders", help="comma-separated confounder columns")
    f.add_argument("--mode", help="ckmr | nonadaptive | kernel-only")
    f.add_argument("--knots", type=int, help="number of predictive-process knots (default min(100, N))")
    f.add_argument("--df", type=int, help="spline degrees of freedom per index (default 9)")
    f.add_argument("--max-pairs", dest="max_pairs", type=int, help="interaction pairs to summarize (default 10)")
    f.add_argument("--out", help="output directory")
    f.add_argument("--plot", action="store_true", help="also write SVG figures")
    _chain_args(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation benchmark")
    s.add_argument("--scenario", help="A | B | C | D")
    s.add_argument("--reps", type=int, help="replicates (default 50)")
    s.add_argument("--n", type=int, help="observations per replicate (default 200)")
    s.add_argument("--sigma2", type=float, help="noise variance (default 1)")
    s.add_argument("--modes", help="comma list of modes (default ckmr,kernel-only)")
    s.add_argument("--out", help="output directory")
    _chain_args(s)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("summarize", help="recompute summaries from saved draws")
    m.add_argument("fit_dir", help="output directory of a previous fit")
    m.add_argument("--out", help="where to write summaries (default: fit_dir)")
    m.add_argument("--data", help="override the recorded data path")
    m.add_argument("--groups", help="override the recorded grouping path")
    m.add_argument("--plot", action="store_true")
    m.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"ckmr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"ckmr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
