import csv
import math

import numpy as np
import pytest
from scipy import stats

from ckmr.model import HyperParameters
from ckmr.sampler import ChainConfig
from ckmr.simulation import (
    BENCHMARK_COLUMNS,
    INDEX1_WEIGHTS,
    ScenarioError,
    ScenarioSpec,
    generate_scenario,
    metrics_from_intervals,
    metrics_from_surfaces,
    mu_a,
    mu_b,
    run_benchmark,
    t_density,
    truth_function,
)


def test_mu_a_at_origin():
    val = float(mu_a(np.zeros((1, 6)))[0])
    ft0 = math.gamma(5.5) / (math.sqrt(10 * math.pi) * math.gamma(5.0))
    assert val == pytest.approx(2 + 4 * ft0, abs=1e-12)
    assert val == pytest.approx(3.5564, abs=1e-4)


def test_t_density_matches_scipy():
    x = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(t_density(x), stats.t(10).pdf(x), rtol=1e-12)


def test_b_minus_a(rng):
    x = rng.uniform(-2, 2, (200, 10))
    np.testing.assert_allclose(truth_function(x, "B") - truth_function(x, "A"),
                               np.cos(2 * x[:, 0]) * x[:, 4] ** 2, atol=1e-12)
    e = x[:, :6]
    np.testing.assert_allclose(mu_b(e) - mu_a(e), np.cos(2 * e[:, 0]) * e[:, 4] ** 2, atol=1e-12)


def test_index_truth(rng):
    x = rng.uniform(-2, 2, (50, 16))
    x2 = x.copy()
    x2[:, 12] = rng.uniform(-2, 2, 50)  # x13 has weight 0
    np.testing.assert_array_equal(truth_function(x, "C"), truth_function(x2, "C"))
    np.testing.assert_allclose(INDEX1_WEIGHTS, [0.80178373, 0.53452248, 0.26726124, 0.0], atol=1e-8)
    # first index with only x1 set reproduces the single-exposure term
    x3 = np.zeros((1, 16))
    x3[0, 0] = 0.7
    e1 = 0.7 * INDEX1_WEIGHTS[0]
    assert truth_function(x3, "C")[0] == pytest.approx(mu_a(np.array([[e1, 0, 0, 0, 0, 0]]))[0], abs=1e-12)


def _mixed_difference(scen, x, j, k, h=0.3):
    def f(z):
        return truth_function(z, scen)
    ej = np.zeros_like(x)
    ej[:, j] = h
    ek = np.zeros_like(x)
    ek[:, k] = h
    return f(x + ej + ek) - f(x + ej) - f(x + ek) + f(x)


def test_additivity(rng):
    x = rng.uniform(-1.5, 1.5, (40, 10))
    for j in range(10):
        for k in range(j + 1, 10):
            assert np.abs(_mixed_difference("A", x, j, k)).max() < 1e-12
    assert np.abs(_mixed_difference("B", x, 0, 4)).max() > 1e-3


def test_generate_scenario_shapes_and_reproducibility():
    spec = ScenarioSpec("C", n=120, sigma2=1.0)
    ds, truth = generate_scenario(spec, np.random.default_rng(4))
    ds2, truth2 = generate_scenario(spec, np.random.default_rng(4))
    assert ds.y.tobytes() == ds2.y.tobytes() and truth.tobytes() == truth2.tobytes()
    assert ds.sizes == [4, 4] + [1] * 8 and ds.p == 16 and ds.q == 3
    X = ds.X
    np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(X.std(axis=0, ddof=1), 1, atol=1e-12)
    a, _ = generate_scenario(ScenarioSpec("A", n=60), np.random.default_rng(1))
    assert a.sizes == [1] * 10 and a.group_names[0] == "x1"


def test_noise_and_confounder_effect():
    spec = ScenarioSpec("A", n=5000, sigma2=2.0)
    ds, truth = generate_scenario(spec, np.random.default_rng(0))
    resid = ds.y - truth
    coef, *_ = np.linalg.lstsq(ds.Z, resid, rcond=None)
    z1_sd = ds.scaling["z1"][1]
    assert coef[1] / z1_sd == pytest.approx(0.5, abs=0.06)
    assert np.var(resid - ds.Z @ coef) == pytest.approx(2.0, rel=0.06)


def test_spec_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec("E")
    with pytest.raises(ScenarioError):
        ScenarioSpec("A", n=10)
    with pytest.raises(ScenarioError):
        ScenarioSpec("A", sigma2=0)
    assert ScenarioSpec("b").scenario == "B"


# --- metrics ---------------------------------------------------------------------------


def test_perfect_surfaces():
    truth = np.array([1.0, 2.0, 4.0])
    met = metrics_from_surfaces(np.tile(truth, (5, 1)), truth)
    assert met.mse == 0 and met.bias == 0 and met.coverage == 1 and met.width == 0
    wide = metrics_from_intervals(truth, truth - 1e6, truth + 1e6, truth)
    assert wide.coverage == 1.0


def test_hand_computed_three_rows():
    mean = np.array([1.0, 0.0, -2.0])
    lo = np.array([0.0, -1.0, -2.5])
    hi = np.array([2.0, 0.5, -1.5])
    truth = np.array([1.5, 1.0, -2.0])
    met = metrics_from_intervals(mean, lo, hi, truth)
    assert met.mse == pytest.approx((0.25 + 1.0 + 0.0) / 3)
    assert met.bias == pytest.approx((-0.5 - 1.0 + 0.0) / 3)
    assert met.width == pytest.approx((2.0 + 1.5 + 1.0) / 3)
    assert met.coverage == pytest.approx(2 / 3)


def test_centering_removes_offsets(rng):
    truth = rng.standard_normal(30)
    S = truth + 5.0 + 0.01 * rng.standard_normal((200, 30))
    met = metrics_from_surfaces(S, truth)
    assert met.mse < 1e-3 and abs(met.bias) < 1e-12
    assert met.mse_draws >= met.mse
    with pytest.raises(ScenarioError):
        metrics_from_surfaces(S, truth[:5])


def test_tiny_benchmark_run(tmp_path):
    spec = ScenarioSpec("A", n=60, reps=1, seed=3)
    cfg = ChainConfig(iterations=30, burn_in=10, thin=2, chain_count=1)
    res = run_benchmark(spec, ["ckmr", "kernel-only"], cfg, HyperParameters(n_knots=20), out_dir=tmp_path)
    rows = res.table()
    assert [r["Method"] for r in rows] == ["CKMR", "BKMR"]
    with (tmp_path / "benchmark.csv").open() as fh:
        reader = csv.reader(fh)
        assert next(reader) == BENCHMARK_COLUMNS
        assert len(list(reader)) == 2
    for name in ("pip_heat.csv", "metrics_raw.csv", "benchmark_meta.json", "progress.jsonl"):
        assert (tmp_path / name).exists()
    assert len((tmp_path / "progress.jsonl").read_text().splitlines()) == 2
    again = run_benchmark(spec, ["ckmr", "kernel-only"], cfg, HyperParameters(n_knots=20))
    assert [r["mse"] for r in again.raw] == [r["mse"] for r in res.raw]
