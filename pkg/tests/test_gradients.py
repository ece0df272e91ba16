"""
Implicit gradients of the balanced objective checked against finite differences.
"""

import numpy as np
import pytest

from balance_bench.balance import BalanceConfig, SolverOptions, assemble_qp, build_grams, solve_weights
from balance_bench.estimators import tau_dr, tau_weighted
from balance_bench.gradients import (
    chain_to_beta,
    implicit_gradients,
    jacobian_weight,
    reduced_inverse,
    sum_zero_basis,
)
from balance_bench.learner import BalancedObjective, IPWObjective
from balance_bench.policies import softmax_assignment

TIGHT = SolverOptions(tol=1e-10)
STEP = 1e-5


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def solve(P, ds, cfg, grams):
    return solve_weights(P, ds.T, cfg, grams, TIGHT)


def central_difference(f, x):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += STEP
        down[index] -= STEP
        grad[index] = (f(up) - f(down)) / (2 * STEP)
    return grad


def face_preserving_difference(f, x, active):
    """Central differences of f(x) -> (value, active set); NaN where a step changes the active set."""
    grad = np.full(x.shape, np.nan)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += STEP
        down[index] -= STEP
        f_up, active_up = f(up)
        f_down, active_down = f(down)
        if np.array_equal(active_up, active) and np.array_equal(active_down, active):
            grad[index] = (f_up - f_down) / (2 * STEP)
    return grad


def assert_close_where_defined(analytic, numeric):
    kept = np.isfinite(numeric)
    assert kept.mean() > 0.5
    np.testing.assert_allclose(analytic[kept], numeric[kept], rtol=1e-3, atol=1e-5)


def rbf_instance(make_instance, seed, lam):
    """Default Mahalanobis RBF objective on a small instance with a sharpened random policy."""
    ds, P = make_instance(seed, n=12, m=3)
    P = P ** 4 / np.sum(P ** 4, axis=1, keepdims=True)
    cfg = BalanceConfig(lam=lam)
    return ds, P, cfg, build_grams(cfg, ds.X, ds.m)


class TestLinearAlgebra:

    def test_sum_zero_basis(self):
        F = sum_zero_basis(5)
        assert F.shape == (5, 4)
        np.testing.assert_allclose(np.ones(5) @ F, 0.0)
        assert np.linalg.matrix_rank(F) == 4

    def test_reduced_inverse_properties(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((6, 6))
        H = B @ B.T + np.eye(6)
        Ht = reduced_inverse(H)
        np.testing.assert_allclose(Ht @ np.ones(6), 0.0, atol=1e-12)
        np.testing.assert_allclose(Ht, Ht.T, atol=1e-12)
        np.testing.assert_allclose(Ht @ H @ Ht, -Ht, atol=1e-10)

    def test_reduced_inverse_single_point(self):
        np.testing.assert_array_equal(reduced_inverse(np.array([[2.0]])), [[0.0]])

    def test_jacobian_weight_with_all_weights_positive(self, instance, identity_cfg):
        ds, P, grams = instance
        solution = solve(P, ds, identity_cfg, grams)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        if not solution.active_set.all():
            pytest.skip("instance has zero weights")
        expected = ds.Y @ reduced_inverse(2.0 * qp.Q) / ds.n
        np.testing.assert_allclose(jacobian_weight(solution, ds.Y, qp.Q), expected)


class TestAssignmentGradients:

    def test_tau_matches_finite_differences(self, instance, identity_cfg):
        ds, P, grams = instance
        solution = solve(P, ds, identity_cfg, grams)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        d_tau, _ = implicit_gradients(solution, ds.Y, P, ds.T, identity_cfg, grams, qp)

        def tau(P_new):
            return tau_weighted(solve(P_new, ds, identity_cfg, grams).W, ds.Y)

        np.testing.assert_allclose(d_tau, central_difference(tau, P), rtol=1e-3, atol=1e-6)

    def test_regularizer_matches_finite_differences(self, instance, identity_cfg):
        ds, P, grams = instance
        solution = solve(P, ds, identity_cfg, grams)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        _, d_reg = implicit_gradients(solution, ds.Y, P, ds.T, identity_cfg, grams, qp)

        def E(P_new):
            return np.sqrt(solve(P_new, ds, identity_cfg, grams).objective)

        np.testing.assert_allclose(d_reg, central_difference(E, P), rtol=1e-3, atol=1e-6)

    def test_doubly_robust_adds_plug_in_term(self, instance, identity_cfg):
        ds, P, grams = instance
        mu_hat = np.random.default_rng(2).standard_normal((ds.n, ds.m))
        residuals = ds.Y - mu_hat[np.arange(ds.n), ds.T]
        solution = solve(P, ds, identity_cfg, grams)
        qp = assemble_qp(P, ds.T, identity_cfg, grams)
        d_tau, _ = implicit_gradients(solution, residuals, P, ds.T, identity_cfg, grams, qp, mu_hat=mu_hat)

        def tau(P_new):
            return tau_dr(solve(P_new, ds, identity_cfg, grams).W, P_new, mu_hat, ds)

        np.testing.assert_allclose(d_tau, central_difference(tau, P), rtol=1e-3, atol=1e-6)


class TestParameterGradients:

    @pytest.fixture
    def beta(self, instance):
        ds, _, _ = instance
        return np.random.default_rng(8).normal(0.0, 0.5, size=(ds.m, ds.d + 1))

    def test_chain_rule_through_softmax(self, instance, beta):
        ds, _, _ = instance
        G = np.random.default_rng(1).standard_normal((ds.n, ds.m))

        def linear(b):
            return float(np.sum(G * softmax_assignment(b, ds.X).P))

        analytic = chain_to_beta(G, softmax_assignment(beta, ds.X), ds.X)
        assert relative_error(analytic, central_difference(linear, beta)) < 1e-6

    @pytest.mark.parametrize("lambda_reg", [0.0, 0.5])
    def test_balanced_objective_gradient(self, instance, identity_cfg, beta, lambda_reg):
        ds, _, grams = instance
        objective = BalancedObjective(ds, identity_cfg, lambda_reg, grams=grams, solver_tol=1e-10)
        _, grad = objective(beta.ravel())
        numeric = central_difference(lambda b: objective(b)[0], beta.ravel())
        assert relative_error(grad, numeric) < 1e-3

    def test_balanced_dr_objective_gradient(self, instance, identity_cfg, beta):
        ds, _, grams = instance
        mu_hat = np.random.default_rng(5).standard_normal((ds.n, ds.m))
        objective = BalancedObjective(ds, identity_cfg, 0.2, mu_hat=mu_hat, grams=grams, solver_tol=1e-10)
        _, grad = objective(beta.ravel())
        numeric = central_difference(lambda b: objective(b)[0], beta.ravel())
        assert relative_error(grad, numeric) < 1e-3

    def test_ipw_objective_gradient(self, instance, beta):
        ds, _, _ = instance
        phi_hat = np.full((ds.n, ds.m), 1.0 / ds.m)
        objective = IPWObjective(ds, phi_hat)
        value, grad = objective(beta.ravel())
        expected = np.mean(ds.Y * softmax_assignment(beta, ds.X).P[np.arange(ds.n), ds.T] * ds.m)
        assert value == pytest.approx(expected)
        numeric = central_difference(lambda b: objective(b)[0], beta.ravel())
        assert relative_error(grad, numeric) < 1e-6

    def test_evaluations_are_memoized(self, instance, identity_cfg, beta):
        ds, _, grams = instance
        objective = BalancedObjective(ds, identity_cfg, grams=grams)
        first = objective(beta.ravel())
        second = objective(beta.ravel())
        assert objective.calls == 1
        assert first[0] == second[0]


SEEDS = list(range(20))


class TestGradientsAcrossInstances:

    def test_instances_include_zero_weights(self, make_instance):
        zeros = []
        for seed in SEEDS:
            ds, P, cfg, grams = rbf_instance(make_instance, seed, 0.05)
            zeros.append(int(np.sum(~solve(P, ds, cfg, grams).active_set)))
        assert max(zeros) > 0

    @pytest.mark.parametrize("lam", [0.05, 1.0])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_tau_gradient(self, make_instance, seed, lam):
        ds, P, cfg, grams = rbf_instance(make_instance, seed, lam)
        solution = solve(P, ds, cfg, grams)
        qp = assemble_qp(P, ds.T, cfg, grams)
        d_tau, d_reg = implicit_gradients(solution, ds.Y, P, ds.T, cfg, grams, qp)

        def tau(P_new):
            perturbed = solve(P_new, ds, cfg, grams)
            return tau_weighted(perturbed.W, ds.Y), perturbed.active_set

        def E(P_new):
            perturbed = solve(P_new, ds, cfg, grams)
            return np.sqrt(perturbed.objective), perturbed.active_set

        assert_close_where_defined(d_tau, face_preserving_difference(tau, P, solution.active_set))
        assert_close_where_defined(d_reg, face_preserving_difference(E, P, solution.active_set))

    @pytest.mark.parametrize("lambda_reg", [0.0, 0.5])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_balanced_objective_gradient(self, make_instance, seed, lambda_reg):
        ds, _, cfg, grams = rbf_instance(make_instance, seed, 0.5)
        beta = np.random.default_rng(seed).normal(0.0, 1.0, size=(ds.m, ds.d + 1))
        objective = BalancedObjective(ds, cfg, lambda_reg, grams=grams, solver_tol=1e-10)

        def value(b):
            return objective(b)[0], objective.last_solution.active_set.copy()

        _, grad = objective(beta.ravel())
        active = objective.last_solution.active_set.copy()
        assert_close_where_defined(grad, face_preserving_difference(value, beta.ravel(), active))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_balanced_dr_objective_gradient(self, make_instance, seed):
        ds, _, cfg, grams = rbf_instance(make_instance, seed, 0.5)
        rng = np.random.default_rng(seed)
        beta = rng.normal(0.0, 1.0, size=(ds.m, ds.d + 1))
        mu_hat = rng.standard_normal((ds.n, ds.m))
        objective = BalancedObjective(ds, cfg, 0.2, mu_hat=mu_hat, grams=grams, solver_tol=1e-10)

        def value(b):
            return objective(b)[0], objective.last_solution.active_set.copy()

        _, grad = objective(beta.ravel())
        active = objective.last_solution.active_set.copy()
        assert_close_where_defined(grad, face_preserving_difference(value, beta.ravel(), active))
