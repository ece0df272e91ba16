"""
Implicit gradients of the bilevel policy-learning objective.

The inner problem W*(pi) is the balancing QP. Around a solution with a fixed
support, W* is differentiable in the policy column pi_t(X_1..n) and

    d tau / d pi_t = (1/n) r^T Ht (I - M^{-1} (I - A) Ht) J_t

with H = 2Q, F the n x (n-1) sum-zero basis F_ij = [i=j] - [i=n],
Ht = -F (F^T H F)^{-1} F^T, A = diag(W > tau_act), M = A + (I - A) Ht and
J_t = -2 gamma_t^2 diag([T = t]) K_t. r is Y for the weighted estimator and
the residuals Y - mu_hat_T(X) for the doubly robust one, which also adds
mu_hat_t / n. The objective's square root E has gradient -D_t / E with
D_t = gamma_t^2 K_t z_t (envelope theorem).
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, solve

from .balance import BalanceConfig, GramLike, QuadraticProgram, WeightsSolution, arm_residual
from .data import AssignmentLike, as_matrix
from .errors import SingularSystemError
from .policies import design_matrix

logger = logging.getLogger(__name__)

RIDGE_RETRY = 1e-10
FLAT_OBJECTIVE = 1e-12


def _K(gram: GramLike) -> np.ndarray:
    return gram.K if hasattr(gram, 'K') else np.asarray(gram, dtype=float)


@dataclass(frozen=True)
class GradientBundle:
    """Gradients with respect to the assignment entries and, if chained, beta."""
    d_tau: np.ndarray
    d_reg: np.ndarray
    d_beta: Optional[np.ndarray] = None

    def combined(self, lam: float = 0.0) -> np.ndarray:
        return self.d_tau + lam * self.d_reg


def _solve_with_retry(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve A X = B; on failure retry once with a trace-scaled ridge."""
    for attempt in range(2):
        system = A
        if attempt:
            ridge = RIDGE_RETRY * abs(np.trace(A)) / A.shape[0]
            system = A + ridge * np.eye(A.shape[0])
            logger.debug(f"Retrying {what} solve with ridge {ridge:.3e}",
                         extra={'event': 'ridge_retry', 'system': what, 'ridge': ridge})
        try:
            with warnings.catch_warnings():
                # ill-conditioning is expected near active-set changes
                warnings.simplefilter('ignore', LinAlgWarning)
                X = solve(system, B)
            if np.all(np.isfinite(X)):
                return X
        except (LinAlgError, ValueError):
            continue
    raise SingularSystemError(f"{what} is singular after ridge retry")


def sum_zero_basis(n: int) -> np.ndarray:
    """F with F_ij = [i = j] - [i = n - 1]; columns span {v : 1^T v = 0}."""
    F = np.zeros((n, n - 1))
    F[:n - 1, :] = np.eye(n - 1)
    F[n - 1, :] = -1.0
    return F


def reduced_inverse(H: np.ndarray) -> np.ndarray:
    """Ht = -F (F^T H F)^{-1} F^T."""
    n = H.shape[0]
    if n == 1:
        return np.zeros((1, 1))
    F = sum_zero_basis(n)
    inner = _solve_with_retry(F.T @ H @ F, F.T, "F^T H F")
    return -F @ inner


def jacobian_weight(
    solution: WeightsSolution,
    residual_vector: np.ndarray,
    Q: np.ndarray
) -> np.ndarray:
    """
    v = (1/n) r^T Ht (I - M^{-1} (I - A) Ht), so that d tau / d pi_t = v J_t.
    """
    n = solution.n
    r = np.asarray(residual_vector, dtype=float)
    Ht = reduced_inverse(2.0 * Q)
    active = solution.active_set.astype(float)
    inactive = 1.0 - active

    a = r @ Ht
    if not np.any(inactive):
        return a / n
    M = np.diag(active) + inactive[:, None] * Ht
    y = _solve_with_retry(M.T, a, "A + (I - A) Ht")
    return (a - (y * inactive) @ Ht) / n


def implicit_gradients(
    solution: WeightsSolution,
    residual_vector: np.ndarray,
    P: AssignmentLike,
    T: np.ndarray,
    cfg: BalanceConfig,
    grams: Sequence[GramLike],
    qp: QuadraticProgram,
    mu_hat: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of tau and of E with respect to every pi_t(X_i).

    Args:
        solution: Converged weights for P
        residual_vector: Y (weighted estimator) or residuals (doubly robust)
        P: n x m assignment the solution was computed for
        T: 0-based treatments
        cfg: Objective configuration
        grams: Per-arm Gram matrices
        qp: Assembled program for (P, T, cfg, grams)
        mu_hat: Outcome predictions; adds the plug-in term mu_hat / n

    Returns:
        (d_tau, d_reg), each n x m
    """
    P = as_matrix(P)
    T = np.asarray(T)
    n, m = P.shape
    gammas = cfg.gammas(m)
    v = jacobian_weight(solution, residual_vector, qp.Q)
    E = float(np.sqrt(max(solution.objective, 0.0)))

    d_tau = np.empty((n, m))
    d_reg = np.zeros((n, m))
    for t in range(m):
        K = _K(grams[t])
        mask = (T == t).astype(float)
        d_tau[:, t] = -2.0 * gammas[t] ** 2 * ((v * mask) @ K)
        if E >= FLAT_OBJECTIVE:
            D_t = gammas[t] ** 2 * (K @ arm_residual(solution.W, P[:, t], T, t))
            d_reg[:, t] = -D_t / E

    if mu_hat is not None:
        d_tau += np.asarray(mu_hat, dtype=float) / n
    return d_tau, d_reg


def chain_to_beta(grad_P: np.ndarray, P: AssignmentLike, X: np.ndarray) -> np.ndarray:
    """
    Pull an n x m gradient in the assignment back to the m x (d+1) logit parameters.

    Uses d pi_t(X_i) / d beta_s = pi_t(X_i) ([t = s] - pi_s(X_i)) (1, X_i).
    """
    P = as_matrix(P)
    G = np.asarray(grad_P, dtype=float)
    R = P * (G - np.sum(G * P, axis=1, keepdims=True))
    return R.T @ design_matrix(X)
