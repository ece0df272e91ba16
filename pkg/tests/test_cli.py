"""
End-to-end tests of the command-line interface.
"""

import json
import logging

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

import balance_bench.cli as cli_module
from balance_bench.cli import cli
from balance_bench.errors import SolverConvergenceError
from balance_bench.estimators import estimate
from balance_bench.policies import UniformPolicy
from balance_bench.simulation import environment_config, example1_environment
from balance_bench.utils.io import load_dataset_csv, load_matrix_csv, save_json


@pytest.fixture(autouse=True)
def detach_log_handlers():
    """The CLI binds handlers to the runner's streams; drop them after each test."""
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(cli, ["--seed", "7", *args])


def report_of(result):
    assert result.exit_code == 0, result.output
    return json.loads(result.stdout)


@pytest.fixture
def known_phi(tmp_path, example1):
    ds, env = example1
    path = tmp_path / "phi.csv"
    np.savetxt(path, env.propensities(ds.X), delimiter=",", fmt="%.17g")
    return path


class TestSimulate:

    def test_writes_csv_to_stdout(self, runner):
        result = run(runner, "simulate", "--n", "100")
        assert result.exit_code == 0
        lines = result.stdout.splitlines()
        assert len(lines) == 101
        assert lines[0] == "x1,x2,t,y"

    def test_seeded(self, runner):
        assert run(runner, "simulate", "--n", "10").stdout == run(runner, "simulate", "--n", "10").stdout

    def test_environment_and_output_dir(self, runner, tmp_path):
        env_path = tmp_path / "env.json"
        result = run(runner, "--output", str(tmp_path / "out"), "simulate", "--example", "kernel",
                     "--n", "20", "--env-out", str(env_path))
        assert result.exit_code == 0, result.output
        assert json.loads(env_path.read_text())["kind"] == "kernel_expansion"
        assert (tmp_path / "out" / "results" / "dataset.csv").exists()
        assert (tmp_path / "out" / "results" / "environment.json").exists()


class TestEvaluate:

    def test_balanced_report(self, runner, dataset_csv):
        report = report_of(run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform"))
        assert report["method"] == "balanced"
        assert report["n"] == 60
        assert len(report["weights"]) == 60
        assert sum(report["weights"]) == pytest.approx(60)
        assert report["objective_parts"]["objective"] >= 0

    def test_weights_can_be_omitted(self, runner, dataset_csv):
        report = report_of(run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "deterministic:2",
                               "--no-weights"))
        assert report["weights"] is None

    def test_clipped_ipw_matches_library(self, runner, dataset_csv, known_phi):
        report = report_of(run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform",
                               "--method", "cipw", "--propensity", f"known:{known_phi}", "--clip", "0.1"))
        ds = load_dataset_csv(dataset_csv)
        phi = load_matrix_csv(known_phi, shape=(ds.n, ds.m))
        expected = estimate("cipw", ds, UniformPolicy(ds.m), phi_hat=phi, clip=0.1)
        assert report["estimate"] == expected.estimate
        assert report["clip"] == 0.1
        assert report["objective_parts"]["objective"] > 0
        assert report["objective_parts"]["kkt_residual"] is None

    def test_direct_with_arm_means_and_no_crossfit(self, runner, dataset_csv):
        report = report_of(run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform",
                               "--method", "direct", "--outcome-model", "arm-mean", "--no-crossfit"))
        ds = load_dataset_csv(dataset_csv)
        means = [ds.Y[ds.T == t].mean() for t in range(ds.m)]
        assert report["estimate"] == pytest.approx(np.mean(means))

    def test_malformed_row(self, runner, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2,t,y\n0.1,0.2,1,1.0\n0.3,abc,2,0.5\n")
        result = run(runner, "evaluate", "--data", str(path), "--policy", "uniform")
        assert result.exit_code == 2
        assert "line 3" in result.stderr

    def test_zero_known_propensity(self, runner, dataset_csv, tmp_path):
        ds = load_dataset_csv(dataset_csv)
        phi = np.full((ds.n, ds.m), 1.0 / ds.m)
        phi[0] = 0.0
        phi[0, (ds.T[0] + 1) % ds.m] = 1.0
        path = tmp_path / "phi.csv"
        np.savetxt(path, phi, delimiter=",")
        result = run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform",
                     "--method", "ipw", "--propensity", f"known:{path}")
        assert result.exit_code == 2
        assert "zero propensity" in result.stderr

    @pytest.mark.parametrize("extra", [
        ["--propensity", "logit"],
        ["--clip", "0.1"],
    ])
    def test_flags_that_do_not_apply(self, runner, dataset_csv, extra):
        result = run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform", *extra)
        assert result.exit_code == 1

    def test_unknown_policy_spec(self, runner, dataset_csv):
        result = run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "greedy")
        assert result.exit_code == 1

    def test_solver_failure_exits_3(self, runner, dataset_csv, monkeypatch):
        def fail(*args, **kwargs):
            raise SolverConvergenceError("weights QP did not converge", np.ones(3), 1.0, 5)

        monkeypatch.setattr(cli_module, "estimate", fail)
        result = run(runner, "evaluate", "--data", str(dataset_csv), "--policy", "uniform")
        assert result.exit_code == 3
        assert "did not converge" in result.stderr


class TestLearn:

    def test_trace_and_determinism(self, runner, dataset_csv, tmp_path):
        trace = tmp_path / "trace.csv"
        args = ["learn", "--data", str(dataset_csv), "--restarts", "1", "--max-iters", "1", "--trace", str(trace)]
        first = report_of(run(runner, *args))
        assert len(pd.read_csv(trace)) == 1
        second = report_of(run(runner, *args))
        assert first["beta"] == second["beta"]
        assert np.asarray(first["beta"]).shape == (5, 3)

    def test_regret_against_environment(self, runner, dataset_csv, tmp_path):
        env_path = save_json(environment_config(example1_environment(sigma=1.0)), tmp_path / "env.json")
        report = report_of(run(runner, "learn", "--data", str(dataset_csv), "--method", "direct",
                               "--eval-against", str(env_path), "--pape-samples", "500"))
        assert report["regret"]["value"] >= 0
        assert report["regret"]["size"] == 500

    def test_regions(self, runner, dataset_csv, tmp_path):
        regions = tmp_path / "regions.csv"
        result = run(runner, "learn", "--data", str(dataset_csv), "--method", "direct", "--regions", str(regions))
        assert result.exit_code == 0, result.output
        grid = pd.read_csv(regions)
        assert list(grid.columns) == ["x1", "x2", "arm"]


class TestConfigAndTune:

    def test_unknown_config_key(self, runner, dataset_csv, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"balance": {"lamda": 1.0}}))
        result = runner.invoke(cli, ["--config", str(config), "evaluate", "--data", str(dataset_csv),
                                     "--policy", "uniform"])
        assert result.exit_code == 1
        assert "balance.lamda" in result.stderr

    def test_tune(self, runner, dataset_csv, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"tune": {"grid": {"bandwidth": [1.0], "gamma": [1.0], "noise": [0.5, 1.0]}}}))
        result = runner.invoke(cli, ["--seed", "1", "--config", str(config), "tune", "--data", str(dataset_csv)])
        report = report_of(result)
        assert len(report["grid"]) == 2
        assert report["best"]["bandwidth"] == 1.0


class TestBenchmark:

    def test_rate(self, runner, tmp_path):
        out = tmp_path / "rate"
        report = report_of(run(runner, "--output", str(out), "benchmark", "--mode", "rate", "--reps", "2",
                               "--grid", "20,30,40,50"))
        assert report["n_grid"] == [20, 30, 40, 50]
        assert (out / "results" / "rate.json").exists()
        assert (out / "results" / "rate_rmse.csv").exists()

    def test_evaluation(self, runner, tmp_path):
        out = tmp_path / "eval"
        report = report_of(run(runner, "--output", str(out), "benchmark", "--mode", "evaluation", "--reps", "2",
                               "--n", "30", "--methods", "balanced,direct"))
        assert [row["method"] for row in report["rows"]] == ["balanced", "direct"]
        for name in ("results/benchmark.json", "results/benchmark_table.csv", "reports/benchmark.md"):
            assert (out / name).exists()
