import csv
import json
import shutil

import numpy as np
import pytest

from ckmr.cli import EXIT_INPUT, EXIT_OK, main
from ckmr.simulation import BENCHMARK_COLUMNS, ScenarioSpec, write_scenario_csv

FIT_FILES = ("draws_chain1.csv", "draws_chain2.csv", "run.json", "pips.csv", "curves.csv",
             "interactions.csv", "weights.csv", "summary.json")
SUMMARY_FILES = ("pips.csv", "curves.csv", "interactions.csv", "weights.csv", "summary.json")


@pytest.fixture(scope="module")
def scenario_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_scenario_csv(d / "a.csv", ScenarioSpec("C", n=80), np.random.default_rng(2), d / "groups.csv")
    return d


def fit_args(data_dir, out, seed=0, extra=()):
    return ["fit", "--data", str(data_dir / "a.csv"), "--groups", str(data_dir / "groups.csv"),
            "--outcome", "y", "--confounders", "z1,z2", "--out", str(out), "--iters", "40",
            "--burnin", "20", "--thin", "2", "--chains", "2", "--seed", str(seed), "--knots", "20",
            "--df", "6", "--threads", "1", *extra]


@pytest.fixture(scope="module")
def fitted(scenario_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(fit_args(scenario_csv, out)) == EXIT_OK
    return out


def test_fit_emits_all_files(fitted):
    for name in FIT_FILES:
        assert (fitted / name).exists(), name
    run = json.loads((fitted / "run.json").read_text())
    assert run["draw_files"] == ["draws_chain1.csv", "draws_chain2.csv"]
    assert run["group_names"][:2] == ["E1", "E2"]
    with (fitted / "draws_chain1.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 10  # (40 - 20) / 2 retained draws


def test_same_seed_byte_identical(scenario_csv, fitted, tmp_path):
    assert main(fit_args(scenario_csv, tmp_path / "again")) == EXIT_OK
    for name in ("draws_chain1.csv", "draws_chain2.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (fitted / name).read_bytes()


def test_summarize_reproduces_fit(fitted, tmp_path):
    assert main(["summarize", str(fitted), "--out", str(tmp_path)]) == EXIT_OK
    for name in SUMMARY_FILES:
        assert (tmp_path / name).read_bytes() == (fitted / name).read_bytes(), name


def test_summarize_missing_and_partial_chains(fitted, tmp_path):
    part = tmp_path / "part"
    shutil.copytree(fitted, part)
    (part / "draws_chain2.csv").unlink()
    with pytest.warns(UserWarning, match="missing draw files"):
        assert main(["summarize", str(part)]) == EXIT_OK
    (part / "draws_chain1.csv").unlink()
    assert main(["summarize", str(part)]) == EXIT_INPUT
    assert main(["summarize", str(tmp_path / "nowhere")]) == EXIT_INPUT


def test_fit_input_errors(scenario_csv, tmp_path, capsys):
    assert main(fit_args(scenario_csv, tmp_path, extra=["--set", "bogus=1"])) == EXIT_INPUT
    assert main(fit_args(scenario_csv, tmp_path, extra=["--set", "a_phi"])) == EXIT_INPUT
    assert main(fit_args(scenario_csv, tmp_path, extra=["--mode", "bkmr"])) == EXIT_INPUT
    args = fit_args(scenario_csv, tmp_path)
    args[args.index("--outcome") + 1] = "nope"
    assert main(args) == EXIT_INPUT
    assert "ckmr: error" in capsys.readouterr().err


def test_simulate_validation(tmp_path):
    assert main(["simulate", "--scenario", "E", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["simulate", "--scenario", "A", "--modes", "ckmr,bogus", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["simulate", "--scenario", "A"]) == EXIT_INPUT


def test_simulate_quick_run(tmp_path):
    args = ["simulate", "--scenario", "B", "--reps", "1", "--n", "60", "--modes", "ckmr,nonadaptive",
            "--iters", "30", "--burnin", "10", "--thin", "2", "--chains", "1", "--threads", "1",
            "--set", "n_knots=20", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    with (tmp_path / "metrics_raw.csv").open() as fh:
        raw = list(csv.DictReader(fh))
    assert [r["mode"] for r in raw] == ["ckmr", "nonadaptive"]
    assert {r["replicate"] for r in raw} == {"0"}
    with (tmp_path / "benchmark.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == BENCHMARK_COLUMNS
    assert [r[2] for r in rows[1:]] == ["CKMR", "NonAdaptive"]


def test_config_file_and_flag_precedence(scenario_csv, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 30, "burnin": 10, "thin": 5, "chains": 1, "hyper": {"a_sigma": 2.0}}))
    args = fit_args(scenario_csv, tmp_path / "o")
    for flag in ("--iters", "--burnin", "--thin", "--chains"):
        i = args.index(flag)
        del args[i:i + 2]
    args += ["--config", str(cfg), "--thin", "2"]
    assert main(args) == EXIT_OK
    run = json.loads((tmp_path / "o" / "run.json").read_text())
    assert run["chain_config"]["iterations"] == 30 and run["chain_config"]["thin"] == 2
    assert run["hyperparameters"]["a_sigma"] == 2.0
    assert run["draw_files"] == ["draws_chain1.csv"]
