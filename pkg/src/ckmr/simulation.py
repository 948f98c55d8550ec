"""Synthetic Scenarios A-D, fit metrics and replicate benchmarks."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .data import ExposureDataset, standardize_column
from .kernel import default_n_knots, select_knots
from .model import HyperParameters
from .sampler import ChainConfig, run_chain
from .splines import build_spline_system
from .summaries import SurfacePredictor, center_rows, compute_pips

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B", "C", "D")
UNIFORM_HALF_WIDTH = math.sqrt(3.0)  # Uniform(-sqrt3, sqrt3) has unit variance
T_DF = 10
CONFOUNDER_EFFECT = 0.5

# Scenario C/D: two multi-exposure indices, remaining exposures enter alone
INDEX1_MEMBERS = (0, 10, 11, 12)  # x1, x11, x12, x13
INDEX1_WEIGHTS = np.array([3.0, 2.0, 1.0, 0.0]) / math.sqrt(14.0)
INDEX2_MEMBERS = (1, 13, 14, 15)  # x2, x14, x15, x16
INDEX2_WEIGHTS = np.array([1.0, 1.0, 1.0, 1.0]) / 2.0

METHOD_LABELS = {
    "single": {"ckmr": "CKMR", "nonadaptive": "NonAdaptive", "kernel-only": "BKMR"},
    "index": {"ckmr": "CMIM", "nonadaptive": "NonAdaptive", "kernel-only": "BMIM"},
}
BENCHMARK_COLUMNS = ["Scenario", "Sigma2", "Method", "MSE", "Bias", "Width", "Cvg", "MSEdraws"]


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    scenario: str = "A"
    n: int = 200
    sigma2: float = 1.0
    seed: int = 0
    reps: int = 50

    def __post_init__(self):
        self.scenario = str(self.scenario).upper()
        if self.scenario not in SCENARIOS:
            raise ScenarioError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n < 50:
            raise ScenarioError("n must be at least 50")
        if not self.sigma2 > 0:
            raise ScenarioError("sigma2 must be positive")
        if self.reps < 1:
            raise ScenarioError("reps must be positive")

    @property
    def n_exposures(self):
        return 10 if self.scenario in "AB" else 16

    @property
    def uses_indices(self):
        return self.scenario in "CD"


def t_density(x, df=T_DF):
    """Student-t density."""
    x = np.asarray(x, dtype=float)
    logc = gammaln(0.5 * (df + 1)) - gammaln(0.5 * df) - 0.5 * math.log(df * math.pi)
    return np.exp(logc - 0.5 * (df + 1) * np.log1p(x * x / df))


def mu_a(e):
    """Additive truth on six effective exposures (columns of ``e``)."""
    e = np.atleast_2d(e)
    return (2.0 * np.cos(2.0 * e[:, 0]) + e[:, 1] + 4.0 * t_density(2.0 * e[:, 2]) + np.sin(2.0 * e[:, 3])
            + e[:, 4] ** 2 - e[:, 5])


def mu_b(e):
    e = np.atleast_2d(e)
    return mu_a(e) + np.cos(2.0 * e[:, 0]) * e[:, 4] ** 2


def effective_exposures(x, scenario):
    """The six arguments of the truth function for raw exposure matrix ``x``."""
    x = np.atleast_2d(x)
    if scenario in "AB":
        return x[:, :6]
    e1 = x[:, list(INDEX1_MEMBERS)] @ INDEX1_WEIGHTS
    e2 = x[:, list(INDEX2_MEMBERS)] @ INDEX2_WEIGHTS
    return np.column_stack([e1, e2, x[:, 2:6]])


def truth_function(x, scenario):
    e = effective_exposures(x, scenario)
    return mu_b(e) if scenario in "BD" else mu_a(e)


def scenario_grouping(scenario):
    """Component names and their group labels, in model order."""
    if scenario in "AB":
        comps = [f"x{j + 1}" for j in range(10)]
        return comps, list(comps)
    comps, groups = [], []
    for j in INDEX1_MEMBERS:
        comps.append(f"x{j + 1}")
        groups.append("E1")
    for j in INDEX2_MEMBERS:
        comps.append(f"x{j + 1}")
        groups.append("E2")
    for j in range(2, 10):
        comps.append(f"x{j + 1}")
        groups.append(f"x{j + 1}")
    return comps, groups


def simulate_raw(spec: ScenarioSpec, rng):
    """Raw exposures, confounders, outcome and truth (unstandardized)."""
    p = spec.n_exposures
    x = rng.uniform(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH, size=(spec.n, p))
    z = rng.standard_normal((spec.n, 2))
    mu = truth_function(x, spec.scenario)
    y = mu + CONFOUNDER_EFFECT * z[:, 0] + math.sqrt(spec.sigma2) * rng.standard_normal(spec.n)
    return x, z, y, mu


def generate_scenario(spec: ScenarioSpec, rng):
    """Simulate one replicate; returns ``(dataset, truth)`` with truth on the outcome scale."""
    x, z, y, mu = simulate_raw(spec, rng)
    comps, groups = scenario_grouping(spec.scenario)
    col = {f"x{j + 1}": j for j in range(x.shape[1])}
    scaling = {}
    std = {}
    for name in comps:
        std[name], mean, sd = standardize_column(x[:, col[name]])
        scaling[name] = (mean, sd)
    order = list(dict.fromkeys(groups))
    mats, members = [], []
    for g in order:
        names = [c for c, gg in zip(comps, groups) if gg == g]
        members.append(names)
        mats.append(np.column_stack([std[c] for c in names]))
    zcols = [np.ones(spec.n)]
    for k in range(2):
        zs, mean, sd = standardize_column(z[:, k])
        scaling[f"z{k + 1}"] = (mean, sd)
        zcols.append(zs)
    ds = ExposureDataset(y=y, groups=mats, Z=np.column_stack(zcols), group_names=order,
                         component_names=members, confounder_names=["(Intercept)", "z1", "z2"], scaling=scaling)
    return ds, mu


def write_scenario_csv(path, spec: ScenarioSpec, rng, grouping_path=None):
    """Write one simulated replicate as CSV (plus an optional grouping file)."""
    x, z, y, mu = simulate_raw(spec, rng)
    header = ["y"] + [f"x{j + 1}" for j in range(x.shape[1])] + ["z1", "z2", "truth"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(spec.n):
            w.writerow([repr(float(v)) for v in (y[i], *x[i], *z[i], mu[i])])
    if grouping_path is not None:
        comps, groups = scenario_grouping(spec.scenario)
        with Path(grouping_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", "group"])
            w.writerows(zip(comps, groups))
    return mu


# --- metrics -------------------------------------------------------------------------


@dataclass
class FitMetrics:
    mse: float
    bias: float
    width: float
    coverage: float
    main_pip: np.ndarray = None
    kernel_pip: np.ndarray = None
    joint_pip: np.ndarray = None
    all_additive_fraction: float = float("nan")
    # posterior expected squared error, mean over draws of (draw - truth)^2
    mse_draws: float = float("nan")
    theta_median: list = None  # coordinatewise posterior median per index


def metrics_from_surfaces(surfaces, truth, center=True):
    """MSE, bias, interval width and coverage from per-draw surfaces at the data rows."""
    S = np.atleast_2d(np.asarray(surfaces, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if S.shape[1] != truth.shape[0]:
        raise ScenarioError(f"surfaces cover {S.shape[1]} rows but truth has {truth.shape[0]}")
    if center:
        S = center_rows(S)
        truth = truth - truth.mean()
    mean = S.mean(axis=0)
    lo, hi = np.percentile(S, [2.5, 97.5], axis=0)
    met = metrics_from_intervals(mean, lo, hi, truth)
    met.mse_draws = float(np.mean((S - truth) ** 2))
    return met


def metrics_from_intervals(mean, lo, hi, truth):
    mean, lo, hi, truth = (np.asarray(a, dtype=float) for a in (mean, lo, hi, truth))
    err = mean - truth
    return FitMetrics(
        mse=float(np.mean(err * err)),
        bias=float(np.mean(err)),
        width=float(np.mean(hi - lo)),
        coverage=float(np.mean((lo <= truth) & (truth <= hi))),
    )


def evaluate_fit(draws, truth, dataset, spline_system, knots, mode="ckmr", seed=0, dense=False, center=True):
    """Fit metrics on centered surfaces at the observed exposure rows."""
    if draws.n_draws == 0:
        raise ScenarioError("no draws")
    if np.shape(truth)[0] != dataset.n:
        raise ScenarioError("truth length does not match the dataset")
    pred = SurfacePredictor(draws, dataset, spline_system, knots, mode=mode, sample=True, seed=seed, dense=dense)
    met = metrics_from_surfaces(pred.training_surfaces(), truth, center=center)
    met.main_pip, met.kernel_pip, met.joint_pip = compute_pips(draws)
    met.all_additive_fraction = float(np.mean(draws.gamma_rho().sum(axis=1) == 0))
    met.theta_median = [np.median(draws.theta(m), axis=0) for m in range(len(draws.layout.sizes))]
    return met


# --- benchmark -----------------------------------------------------------------------------


def fit_replicate(spec: ScenarioSpec, rep, mode, config: ChainConfig, hyper: HyperParameters):
    """Simulate replicate ``rep`` and fit it in ``mode``; returns (metrics, runtime, draws)."""
    seed = spec.seed + rep
    ds, truth = generate_scenario(spec, np.random.default_rng(seed))
    h = hyper.replace(mode=mode)
    sp = build_spline_system(ds, h.df) if mode != "kernel-only" else None
    kn = select_knots(ds, h.n_knots or default_n_knots(ds.n), seed=seed)
    cfg = ChainConfig(**{**asdict(config), "seed": seed, "threads": 1})
    t0 = time.perf_counter()
    draws = run_chain(ds, sp, kn, h, cfg)
    met = evaluate_fit(draws, truth, ds, sp, kn, mode=mode, seed=seed)
    return met, time.perf_counter() - t0, draws


def _replicate_job(args):
    spec, rep, mode, config, hyper = args
    met, runtime, draws = fit_replicate(spec, rep, mode, config, hyper)
    acc = draws.diagnostics[0]["acceptance_rates"] if draws.diagnostics else {}
    return rep, mode, met, runtime, acc


@dataclass
class BenchmarkResult:
    spec: ScenarioSpec
    modes: list
    raw: list = field(default_factory=list)  # dicts per (replicate, mode)
    pips: dict = field(default_factory=dict)  # mode -> (main, kernel, joint) averaged over replicates

    def table(self):
        kind = "index" if self.spec.uses_indices else "single"
        rows = []
        for mode in self.modes:
            sub = [r for r in self.raw if r["mode"] == mode]
            rows.append({
                "Scenario": self.spec.scenario,
                "Sigma2": self.spec.sigma2,
                "Method": METHOD_LABELS[kind][mode],
                "MSE": float(np.mean([r["mse"] for r in sub])),
                "Bias": float(np.mean([r["bias"] for r in sub])),
                "Width": float(np.mean([r["width"] for r in sub])),
                "Cvg": float(np.mean([r["coverage"] for r in sub])),
                "MSEdraws": float(np.mean([r["mse_draws"] for r in sub])),
            })
        return rows


def run_benchmark(spec: ScenarioSpec, modes, config: ChainConfig, hyper: HyperParameters | None = None,
                  out_dir=None, threads=1, progress=None):
    """Fit every replicate in every mode and aggregate the benchmark-table metrics."""
    hyper = hyper or HyperParameters()
    modes = list(modes)
    jobs = [(spec, r, m, config, hyper) for r in range(spec.reps) for m in modes]
    result = BenchmarkResult(spec, modes)
    pip_acc = {m: [] for m in modes}
    if out_dir is not None:
        # one JSON line per finished fit, so long runs can be monitored
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "progress.jsonl"
        log_path.write_text("", encoding="utf-8")
        user_progress = progress

        def progress(row):
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
            if user_progress is not None:
                user_progress(row)

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = pool.map(_replicate_job, jobs)
            for out in outputs:
                _collect(result, pip_acc, out, progress)
    else:
        for job in jobs:
            _collect(result, pip_acc, _replicate_job(job), progress)
    result.raw.sort(key=lambda r: (r["replicate"], modes.index(r["mode"])))
    for m in modes:
        mains, kerns, joints = zip(*pip_acc[m])
        result.pips[m] = (np.mean(mains, axis=0), np.mean(kerns, axis=0), np.mean(joints, axis=0))
    if out_dir is not None:
        write_benchmark(result, out_dir, config, hyper)
    return result


def _collect(result, pip_acc, out, progress):
    rep, mode, met, runtime, acc = out
    M = met.main_pip.shape[0]
    row = {
        "scenario": result.spec.scenario,
        "replicate": rep,
        "seed": result.spec.seed + rep,
        "mode": mode,
        "mse": met.mse,
        "bias": met.bias,
        "width": met.width,
        "coverage": met.coverage,
        "mse_draws": met.mse_draws,
        "all_additive_fraction": met.all_additive_fraction,
        "runtime": runtime,
    }
    for m in range(M):
        row[f"main_pip.{m + 1}"] = float(met.main_pip[m])
    for m in range(M):
        row[f"kernel_pip.{m + 1}"] = float(met.kernel_pip[m])
    for m, th in enumerate(met.theta_median or []):
        if th.size > 1:
            for l, v in enumerate(th):
                row[f"theta_median.{m + 1}.{l + 1}"] = float(v)
    for j in range(M):
        for k in range(j + 1, M):
            row[f"joint_pip.{j + 1}.{k + 1}"] = float(met.joint_pip[j, k])
    for key, v in acc.items():
        row[f"acc.{key}"] = v
    result.raw.append(row)
    pip_acc[mode].append((met.main_pip, met.kernel_pip, met.joint_pip))
    if progress is not None:
        progress(row)


def write_benchmark(result: BenchmarkResult, out_dir, config=None, hyper=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "benchmark.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in result.table():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    kind = "index" if result.spec.uses_indices else "single"
    with (out / "pip_heat.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Method", "index_j", "index_k", "type", "pip"])
        for mode in result.modes:
            main, kern, joint = result.pips[mode]
            label = METHOD_LABELS[kind][mode]
            M = main.shape[0]
            for j in range(M):
                w.writerow([label, j + 1, j + 1, "main", repr(float(main[j]))])
                w.writerow([label, j + 1, j + 1, "kernel", repr(float(kern[j]))])
            for j in range(M):
                for k in range(M):
                    if j != k:
                        w.writerow([label, j + 1, k + 1, "joint", repr(float(joint[j, k]))])
    if result.raw:
        keys = list(result.raw[0].keys())
        for r in result.raw[1:]:
            keys += [k for k in r if k not in keys]
        with (out / "metrics_raw.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for r in result.raw:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    meta = {"spec": asdict(result.spec), "modes": result.modes}
    if config is not None:
        meta["chain_config"] = asdict(config)
    if hyper is not None:
        meta["hyperparameters"] = hyper.to_dict()
    with (out / "benchmark_meta.json").open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
