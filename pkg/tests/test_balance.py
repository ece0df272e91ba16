"""
Tests for the worst-case CMSE objective and the balancing-weights QP.
"""

from itertools import combinations

import numpy as np
import pytest
from scipy.optimize import minimize

from balance_bench.balance import (
    BalanceConfig,
    SolverOptions,
    assemble_qp,
    build_grams,
    imbalance_sq,
    kkt_residual,
    multipliers,
    objective,
    solve_weights,
)
from balance_bench.errors import ConfigError, SolverConvergenceError, UnsupportedExponentError
from balance_bench.estimators import weights_nipw


def simplex_grid(n: int, steps: int = 20) -> np.ndarray:
    """Every W on the scaled simplex with coordinates in multiples of n / steps."""
    points = []
    for bars in combinations(range(steps + n - 1), n - 1):
        points.append(np.diff([-1, *bars, steps + n - 1]) - 1)
    return np.asarray(points, dtype=float) * (n / steps)


def qp_values(qp, W: np.ndarray) -> np.ndarray:
    return np.einsum('ij,jk,ik->i', W, qp.Q, W) - 2.0 * W @ qp.c + qp.const


def single_arm_pair(lam: float = 1.0):
    """m=1, n=2, K=I, P=(1,1)."""
    P = np.ones((2, 1))
    T = np.zeros(2, dtype=int)
    return P, T, BalanceConfig(lam=lam), [np.eye(2)]


class TestObjective:

    def test_replicating_logging_has_zero_imbalance(self):
        T = np.array([0, 1, 1, 0])
        P = np.eye(2)[T]
        K = np.ones((4, 4))
        assert imbalance_sq(np.ones(4), P[:, 0], T, K, 0) == 0.0

    def test_single_unit_imbalance(self):
        assert imbalance_sq(np.array([1.0]), np.array([0.0]), np.array([0]), np.eye(1), 0) == 1.0

    def test_imbalance_matches_double_sum(self):
        rng = np.random.default_rng(0)
        W, P_t, T = rng.random(2), rng.random(2), np.array([0, 1])
        A = rng.standard_normal((2, 2))
        K = A @ A.T
        expected = sum(
            (W[i] * (T[i] == 0) - P_t[i]) * (W[j] * (T[j] == 0) - P_t[j]) * K[i, j]
            for i in range(2) for j in range(2)
        )
        assert imbalance_sq(W, P_t, T, K, 0) == pytest.approx(expected, abs=1e-12)

    def test_hand_computed_single_arm_value(self):
        P, T, cfg, grams = single_arm_pair()
        total, per_arm, variance = objective(np.ones(2), P, T, cfg, grams)
        assert total == pytest.approx(0.5)
        assert per_arm[0] == pytest.approx(0.0)
        assert variance == pytest.approx(0.5)

    def test_replicating_logging_objective_is_one_over_n(self):
        T = np.array([0, 1, 2, 0, 1])
        P = np.eye(3)[T]
        grams = [np.eye(5)] * 3
        total, _, _ = objective(np.ones(5), P, T, BalanceConfig(), grams)
        assert total == pytest.approx(1 / 5)

    def test_only_exponent_two_is_supported(self):
        P, T, _, grams = single_arm_pair()
        with pytest.raises(UnsupportedExponentError):
            objective(np.ones(2), P, T, BalanceConfig(p=1.0), grams)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BalanceConfig(gamma=0.0)
        with pytest.raises(ConfigError):
            BalanceConfig(lam=-1.0)
        with pytest.raises(ConfigError):
            BalanceConfig(gamma=[1.0, 2.0]).gammas(3)


class TestQuadraticProgram:

    def test_matches_objective_on_random_weights(self, make_instance, identity_cfg):
        ds, P = make_instance(4, n=6, m=3)
        grams = build_grams(identity_cfg, ds.X, ds.m)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        rng = np.random.default_rng(1)
        for _ in range(200):
            W = rng.random(6) * 3
            assert qp.value(W) == pytest.approx(objective(W, P, ds.T, identity_cfg, grams)[0], rel=1e-9, abs=1e-9)

    def test_zero_assignment_gives_zero_linear_term(self, make_instance, identity_cfg):
        ds, _ = make_instance(5, n=6, m=2)
        grams = build_grams(identity_cfg, ds.X, ds.m)
        qp = assemble_qp(np.zeros((6, 2)), ds.T, identity_cfg, grams)
        np.testing.assert_array_equal(qp.c, 0.0)

    def test_single_arm_identity_kernel_is_diagonal(self):
        T = np.array([0, 1, 0, 1])
        grams = [np.eye(4), np.zeros((4, 4))]
        qp = assemble_qp(np.full((4, 2), 0.5), T, BalanceConfig(lam=0.0), grams)
        np.testing.assert_allclose(qp.Q, np.diag([1.0, 0.0, 1.0, 0.0]))


class TestSolveWeights:

    def test_single_arm_pair_solution(self):
        P, T, cfg, grams = single_arm_pair()
        solution = solve_weights(P, T, cfg, grams)
        np.testing.assert_allclose(solution.W, [1.0, 1.0], atol=1e-9)
        assert solution.objective == pytest.approx(0.5)
        assert solution.kkt_residual <= 1e-7

    def test_analytic_solution_has_zero_residual(self):
        P, T, cfg, grams = single_arm_pair()
        qp = assemble_qp(P, T, cfg, grams)
        W = np.ones(2)
        assert kkt_residual(W, multipliers(W, W > 0, qp), qp.Q, qp.c) <= 1e-10

    def test_uniform_weights_violate_kkt(self, instance, identity_cfg):
        ds, P, grams = instance
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        W = np.ones(ds.n)
        assert kkt_residual(W, multipliers(W, W > 0, qp), qp.Q, qp.c) > 1e-7

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_grid_search_on_small_instances(self, seed, make_instance, identity_cfg):
        n = 3 + seed % 3
        ds, P = make_instance(100 + seed, n=n, m=2)
        grams = build_grams(identity_cfg, ds.X, ds.m)
        solution = solve_weights(P, ds.T, identity_cfg, grams)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)

        grid_best = qp_values(qp, simplex_grid(n)).min()
        assert solution.objective <= grid_best + 1e-9

        reference = minimize(
            qp.value, np.ones(n), jac=qp.gradient, method='SLSQP',
            bounds=[(0.0, None)] * n,
            constraints={'type': 'eq', 'fun': lambda w: w.sum() - n},
            options={'ftol': 1e-14, 'maxiter': 500}
        )
        assert solution.objective <= qp.value(reference.x) + 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_feasible_and_dominant(self, seed, make_instance, identity_cfg):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 80))
        ds, P = make_instance(200 + seed, n=n, m=3)
        grams = build_grams(identity_cfg, ds.X, ds.m)
        solution = solve_weights(P, ds.T, identity_cfg, grams)

        assert np.all(solution.W >= 0)
        assert abs(solution.W.sum() - n) <= 1e-8 * n
        assert solution.kkt_residual <= 1e-7
        total, per_arm, variance = objective(solution.W, P, ds.T, identity_cfg, grams)
        assert solution.objective == pytest.approx(float(per_arm.sum()) + variance, abs=1e-9)

        uniform = objective(np.ones(n), P, ds.T, identity_cfg, grams)[0]
        phi = np.tile(ds.arm_counts() / n, (n, 1))
        nipw = objective(weights_nipw(P, ds.T, phi), P, ds.T, identity_cfg, grams)[0]
        assert solution.objective <= uniform + 1e-10
        assert solution.objective <= nipw + 1e-10
        for W in n * rng.dirichlet(np.ones(n), size=100):
            assert solution.objective <= objective(W, P, ds.T, identity_cfg, grams)[0] + 1e-8

    def test_replicating_logging_reaches_variance_floor(self, make_instance):
        ds, _ = make_instance(7, n=15, m=3)
        P = ds.treatment_indicators()
        cfg = BalanceConfig(lam=1e-3)
        grams = build_grams(cfg, ds.X, ds.m)
        solution = solve_weights(P, ds.T, cfg, grams)
        assert solution.objective <= 1e-3 / ds.n + 1e-9

    def test_warm_start_reaches_the_same_solution(self, instance, identity_cfg):
        ds, P, grams = instance
        cold = solve_weights(P, ds.T, identity_cfg, grams)
        warm = solve_weights(P, ds.T, identity_cfg, grams, SolverOptions(warm_start=cold.W))
        assert warm.objective == pytest.approx(cold.objective, abs=1e-9)
        assert warm.iterations <= cold.iterations

    def test_support_counts_positive_weights(self, instance, identity_cfg):
        ds, P, grams = instance
        solution = solve_weights(P, ds.T, identity_cfg, grams)
        assert solution.support == int(np.sum(solution.W > 1e-8 * ds.n))
        assert solution.to_parts().imbalance == pytest.approx(list(np.sqrt(solution.imbalance_sq)))

    def test_unreachable_tolerance_raises_with_best_iterate(self, instance, identity_cfg):
        ds, P, grams = instance
        with pytest.raises(SolverConvergenceError) as excinfo:
            solve_weights(P, ds.T, identity_cfg, grams, SolverOptions(tol=0.0))
        assert excinfo.value.best_iterate.shape == (ds.n,)
        assert excinfo.value.residual > 0


def test_posterior_cmse_equals_objective(make_instance):
    """Averaging over a Gaussian-process prior on mu and Gaussian noise recovers the objective."""
    n, m, sigma = 50, 3, 0.5
    ds, P = make_instance(21, n=n, m=m)
    cfg = BalanceConfig(gamma=1.0, lam=sigma ** 2)
    grams = build_grams(cfg, ds.X, m)
    W = solve_weights(P, ds.T, cfg, grams).W
    target = objective(W, P, ds.T, cfg, grams)[0]

    rng = np.random.default_rng(0)
    draws = 20000
    evals, evecs = np.linalg.eigh(grams[0].K)
    root = evecs * np.sqrt(np.maximum(evals, 0.0)) * n
    bias = np.zeros(draws)
    for t in range(m):
        f_t = root @ rng.standard_normal((n, draws))
        z_t = W * (ds.T == t) - P[:, t]
        bias += z_t @ f_t / n
    noise = W @ (sigma * rng.standard_normal((n, draws))) / n
    mc = np.mean((bias + noise) ** 2)
    assert mc == pytest.approx(target, rel=0.05)
