"""
Tests for the policy learners.
"""

import numpy as np
import pytest

from balance_bench.balance import BalanceConfig
from balance_bench.data import LoggedDataset
from balance_bench.errors import ConfigError, LearningError, SingularSystemError, ZeroPropensityError
from balance_bench.estimators import tau_weighted, weights_ipw
from balance_bench.kernels import KernelSpec
from balance_bench.learner import (
    AssignmentObjective,
    LearnerConfig,
    initial_betas,
    learn_balanced,
    learn_balanced_dr,
    learn_direct,
    learn_dr_logit,
    learn_ipw_logit,
    run_restarts,
)
from balance_bench.models import fit_arm_means
from balance_bench.policies import GreedyPolicy, LogitPolicy, UniformPolicy
from balance_bench.schema import LearnerMethod

FAST = LearnerConfig(restarts=2, max_iters=15, seed=1)


@pytest.fixture
def small_example(example1):
    ds, env = example1
    return ds.subset(np.arange(30)), env


class TestLearnerConfig:

    @pytest.mark.parametrize("field,value", [
        ("restarts", 0),
        ("lambda_reg", -1.0),
        ("init_scale", -0.1),
        ("max_iters", 0),
    ])
    def test_rejects_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            LearnerConfig(**{field: value})

    def test_initial_betas_are_seeded(self):
        first = initial_betas(3, 2, LearnerConfig(restarts=4, seed=9))
        second = initial_betas(3, 2, LearnerConfig(restarts=4, seed=9))
        assert len(first) == 4
        assert first[0].shape == (3, 3)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(first[0], first[1])


class TestBalancedLearner:

    def test_single_iteration_trace(self, small_example):
        ds, _ = small_example
        result = learn_balanced(ds, BalanceConfig(), LearnerConfig(restarts=1, max_iters=1))
        assert len(result.trace) == 1
        entry = result.trace[0]
        assert entry.iteration == 1
        assert entry.active_set_size is not None and entry.active_set_size >= 1

    def test_is_deterministic(self, small_example):
        ds, _ = small_example
        first = learn_balanced(ds, BalanceConfig(), FAST)
        second = learn_balanced(ds, BalanceConfig(), FAST)
        np.testing.assert_array_equal(first.policy.beta, second.policy.beta)
        assert first.objective == second.objective

    def test_threads_do_not_change_the_result(self, small_example):
        ds, _ = small_example
        serial = learn_balanced(ds, BalanceConfig(), FAST)
        threaded = learn_balanced(ds, BalanceConfig(), LearnerConfig(restarts=2, max_iters=15, seed=1, n_jobs=2))
        np.testing.assert_array_equal(serial.policy.beta, threaded.policy.beta)

    def test_best_restart_is_reported(self, small_example):
        ds, _ = small_example
        result = learn_balanced(ds, BalanceConfig(), FAST)
        assert len(result.restart_objectives) == 2
        assert result.objective == min(result.restart_objectives)
        assert isinstance(result.policy, LogitPolicy)
        assert result.policy.beta.shape == (ds.m, ds.d + 1)
        assert result.method == LearnerMethod.BALANCED

    def test_learning_improves_on_the_start(self, small_example):
        ds, _ = small_example
        result = learn_balanced(ds, BalanceConfig(), LearnerConfig(restarts=1, max_iters=20, seed=2))
        assert result.trace[-1].objective <= result.trace[0].objective + 1e-9

    def test_doubly_robust_variant(self, small_example):
        ds, env = small_example
        result = learn_balanced_dr(ds, BalanceConfig(), FAST, env.mu_matrix(ds.X))
        assert result.method == LearnerMethod.BALANCED_DR
        assert np.isfinite(result.objective)

    def test_single_arm(self):
        rng = np.random.default_rng(0)
        ds = LoggedDataset(X=rng.standard_normal((10, 2)), T=np.zeros(10, dtype=int), Y=rng.standard_normal(10), m=1)
        cfg = BalanceConfig(kernel=KernelSpec(scale_matrix=np.eye(2)))
        result = learn_balanced(ds, cfg, LearnerConfig(restarts=1))
        assert result.objective == pytest.approx(ds.Y.mean())
        assert len(result.trace) == 1


class TestPropensityLearners:

    def test_ipw_learner_beats_uniform(self, example1):
        ds, env = example1
        phi = env.propensities(ds.X)
        result = learn_ipw_logit(ds, phi, LearnerConfig(restarts=3, max_iters=50))
        uniform = tau_weighted(weights_ipw(UniformPolicy(ds.m).probabilities(ds.X), ds.T, phi), ds.Y)
        assert result.objective <= uniform + 1e-9
        assert result.method == LearnerMethod.IPW_LOGIT

    def test_dr_learner_runs(self, example1):
        ds, env = example1
        result = learn_dr_logit(ds, env.propensities(ds.X), env.mu_matrix(ds.X), FAST)
        assert result.method == LearnerMethod.DR_LOGIT
        assert np.isfinite(result.objective)

    def test_zero_observed_propensity(self, example1):
        ds, _ = example1
        phi = np.full((ds.n, ds.m), 1.0 / ds.m)
        phi[0] = 0.0
        phi[0, (ds.T[0] + 1) % ds.m] = 1.0
        with pytest.raises(ZeroPropensityError):
            learn_ipw_logit(ds, phi, FAST)


class TestDirectLearner:

    def test_greedy_on_arm_means(self, example1):
        ds, _ = example1
        model = fit_arm_means(ds)
        result = learn_direct(ds, model)
        assert isinstance(result.policy, GreedyPolicy)
        assert np.all(result.policy.choices(ds.X) == np.argmin(model.means))
        assert result.objective == pytest.approx(model.means.min())
        assert result.to_report().beta is None


class FailingObjective(AssignmentObjective):

    def evaluate_assignment(self, P):
        raise SingularSystemError("always singular")


@pytest.mark.filterwarnings("ignore")
def test_all_restarts_failing(small_example):
    ds, _ = small_example
    with pytest.raises(LearningError):
        run_restarts(lambda: FailingObjective(ds), ds, LearnerConfig(restarts=2, max_iters=3), LearnerMethod.BALANCED)


def test_report_round_trip(small_example):
    ds, _ = small_example
    report = learn_balanced(ds, BalanceConfig(), LearnerConfig(restarts=1, max_iters=2)).to_report()
    assert np.asarray(report.beta).shape == (ds.m, ds.d + 1)
    assert report.restart_objectives == [report.objective]
