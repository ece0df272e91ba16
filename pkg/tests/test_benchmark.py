"""
Tests for the replication harnesses.

The statistical reproductions are marked slow and deselected by default.
"""

import numpy as np
import pytest

from balance_bench.benchmark import (
    evaluation_labels,
    fit_log_log_slope,
    run_evaluation_benchmark,
    run_learning_benchmark,
    run_rate_experiment,
    spawn_seeds,
    summarize_errors,
)
from balance_bench.errors import ConfigError
from balance_bench.learner import LearnerConfig
from balance_bench.schema import EstimatorMethod
from balance_bench.simulation import Example1Spec, example1_environment, gen_example1, optimal_policy, sape

QUICK_LEARNER = LearnerConfig(restarts=1, max_iters=5)


class TestStatistics:

    def test_error_decomposition(self):
        errors = [0.1, -0.3, 0.5, 0.2]
        rmse, bias, sd = summarize_errors(errors)
        assert bias == pytest.approx(0.125)
        assert sd == pytest.approx(np.std(errors))
        assert rmse ** 2 == pytest.approx(bias ** 2 + sd ** 2)
        assert rmse == pytest.approx(np.sqrt(np.mean(np.square(errors))))

    def test_slope_of_exact_power_law(self):
        n_grid = [50, 100, 200, 400]
        fit = fit_log_log_slope(n_grid, [2 * n ** -0.5 for n in n_grid])
        assert fit.slope == pytest.approx(-0.5)
        assert fit.intercept == pytest.approx(np.log(2))
        assert fit.ci_low == pytest.approx(-0.5) and fit.ci_high == pytest.approx(-0.5)

    def test_spawned_seeds(self):
        seeds = spawn_seeds(3, 5)
        assert seeds == spawn_seeds(3, 5)
        assert len(set(seeds)) == 5

    def test_labels(self):
        labels = evaluation_labels([EstimatorMethod.BALANCED, EstimatorMethod.CIPW, EstimatorMethod.DIRECT])
        assert labels == ["balanced", "cipw-true", "cipw-est", "direct"]


class TestEvaluationBenchmark:

    @pytest.fixture(scope="class")
    def report(self):
        return run_evaluation_benchmark(
            Example1Spec(n=40, sigma=1.0, seed=2), methods=["balanced", "ipw", "direct"], reps=3
        )

    def test_rows_and_target(self, report):
        assert [row.method for row in report.rows] == ["balanced", "ipw-true", "ipw-est", "direct"]
        X = gen_example1(Example1Spec(n=40, seed=2))[0].X
        env = example1_environment()
        assert report.target == pytest.approx(sape(optimal_policy(env).probabilities(X), env.mu_matrix(X)))
        assert report.mode == "evaluation" and report.replications == 3

    def test_columns(self, report):
        balanced = report.row("balanced")
        assert balanced.failures == 0
        assert balanced.rmse ** 2 == pytest.approx(balanced.bias ** 2 + balanced.sd ** 2)
        assert balanced.dr_rmse is not None
        assert 1 <= balanced.support_mean <= 40
        direct = report.row("direct")
        assert direct.dr_rmse is None and direct.support_mean is None
        assert report.row("ipw-true").failures == 0

    def test_is_reproducible(self, report):
        again = run_evaluation_benchmark(
            Example1Spec(n=40, sigma=1.0, seed=2), methods=["balanced", "ipw", "direct"], reps=3
        )
        assert again.model_dump() == report.model_dump()

    def test_invalid_requests(self):
        with pytest.raises(ConfigError):
            run_evaluation_benchmark(Example1Spec(n=20), reps=1)
        with pytest.raises(ConfigError):
            run_evaluation_benchmark(Example1Spec(n=20), methods=["balanced-dr"], reps=2)


class TestLearningBenchmark:

    def test_small_run(self):
        report = run_learning_benchmark(
            Example1Spec(n=30, sigma=0.0, seed=1), learners=["direct", "balanced"], draws=2,
            lcfg=QUICK_LEARNER, pape_samples=300
        )
        assert [row.method for row in report.rows] == ["direct", "balanced"]
        for row in report.rows:
            assert row.mean_regret is None or row.mean_regret >= 0
            assert row.failures <= 2

    def test_invalid_requests(self):
        with pytest.raises(ConfigError):
            run_learning_benchmark(draws=0)
        with pytest.raises(ConfigError):
            run_learning_benchmark(learners=[])
        with pytest.raises(ValueError):
            run_learning_benchmark(learners=["gradient-boosting"])


class TestRateExperiment:

    def test_small_run(self):
        report = run_rate_experiment(n_grid=(20, 30, 40, 50), reps=3, seed=1)
        assert report.n_grid == [20, 30, 40, 50]
        assert set(report.rmse) == {"balanced", "ipw"}
        assert all(len(values) == 4 for values in report.rmse.values())
        assert set(report.fits) == {"balanced", "ipw"}

    @pytest.mark.parametrize("kwargs", [
        {"n_grid": (20, 40, 80)},
        {"n_grid": (1, 20, 40, 80)},
        {"reps": 1},
        {"methods": ("balanced", "dr")},
    ])
    def test_invalid_requests(self, kwargs):
        with pytest.raises(ConfigError):
            run_rate_experiment(**kwargs)


@pytest.mark.slow
def test_balanced_evaluation_orderings():
    report = run_evaluation_benchmark(
        Example1Spec(n=100, sigma=1.0, seed=0), methods=["balanced", "ipw"], reps=200, n_jobs=-1
    )
    balanced = report.row("balanced")
    assert balanced.rmse < report.row("ipw-est").rmse
    assert abs(balanced.dr_bias) < abs(balanced.bias)
    assert balanced.support_mean >= 5 * report.row("ipw-est").support_mean


@pytest.mark.slow
def test_balanced_learners_have_lower_regret():
    report = run_learning_benchmark(
        Example1Spec(n=100, sigma=0.0, seed=0), draws=20, pape_samples=20000, n_jobs=-1
    )
    balanced = report.row("balanced").mean_regret
    assert balanced < report.row("ipw-logit").mean_regret
    assert balanced < report.row("dr-logit").mean_regret
    assert report.row("balanced-dr").mean_regret <= 0.15


@pytest.mark.slow
def test_balanced_error_shrinks_at_root_n():
    report = run_rate_experiment(n_grid=(50, 100, 200, 400), reps=100, seed=0, n_jobs=-1)
    assert -0.65 <= report.fits["balanced"].slope <= -0.35
