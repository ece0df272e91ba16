"""
Policy-value estimators.

All estimators return the average cost of the evaluated policy on the logged
sample. Weighting methods produce a weight vector W and estimate
(1/n) sum W_i Y_i; with an outcome model the doubly robust form adds the
plug-in term and weights the residuals instead.
"""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import eigh

from .balance import (
    BalanceConfig,
    GramLike,
    SolverOptions,
    WeightsSolution,
    active_threshold,
    build_grams,
    objective,
    solve_weights,
)
from .data import AssignmentLike, LoggedDataset, Policy, PolicyAssignment, as_matrix, assignment_of
from .errors import ConfigError, DataError, NoOverlapError, ZeroPropensityError
from .schema import EstimatorMethod, EvaluationReport, ObjectiveParts

logger = logging.getLogger(__name__)

DEFAULT_CLIP = 0.05


def _observed(P: np.ndarray, T: np.ndarray) -> np.ndarray:
    return P[np.arange(P.shape[0]), np.asarray(T, dtype=int)]


def tau_weighted(W: np.ndarray, Y: np.ndarray) -> float:
    """(1/n) sum W_i Y_i."""
    W = np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if W.shape != Y.shape:
        raise DataError(f"weights have shape {W.shape}, outcomes {Y.shape}")
    return float(W @ Y) / len(Y)


def tau_direct(P: AssignmentLike, mu_hat: np.ndarray) -> float:
    """Plug-in estimate (1/n) sum_i sum_t P[i, t] mu_hat[i, t]."""
    P = as_matrix(P)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if P.shape != mu_hat.shape:
        raise DataError(f"assignment has shape {P.shape}, outcome predictions {mu_hat.shape}")
    return float(np.sum(P * mu_hat)) / P.shape[0]


def tau_dr(W: np.ndarray, P: AssignmentLike, mu_hat: np.ndarray, ds: LoggedDataset) -> float:
    """Doubly robust estimate: plug-in term plus weighted residuals."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    residuals = ds.Y - _observed(mu_hat, ds.T)
    return tau_direct(P, mu_hat) + tau_weighted(W, residuals)


def conditional_bias(W: np.ndarray, P: AssignmentLike, T: np.ndarray, f_matrix: np.ndarray) -> float:
    """
    B(W, pi; f) = (1/n) sum_t sum_i (W_i [T_i = t] - P[i, t]) f_t(X_i).

    ``f_matrix`` holds f_t(X_i) as an n x m matrix.
    """
    P = as_matrix(P)
    f_matrix = np.asarray(f_matrix, dtype=float)
    W = np.asarray(W, dtype=float)
    n = P.shape[0]
    return (float(W @ _observed(f_matrix, T)) - float(np.sum(P * f_matrix))) / n


def weights_ipw(P: AssignmentLike, T: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    """W_i = P[i, T_i] / phi_hat[i, T_i]."""
    P = as_matrix(P)
    observed_phi = _observed(np.asarray(phi_hat, dtype=float), T)
    bad = np.flatnonzero(~(observed_phi > 0))
    if bad.size:
        raise ZeroPropensityError(f"zero propensity on observed arm at row {int(bad[0])}")
    return _observed(P, T) / observed_phi


def weights_cipw(P: AssignmentLike, T: np.ndarray, phi_hat: np.ndarray, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """W_i = P[i, T_i] / max(M, phi_hat[i, T_i])."""
    if not clip > 0:
        raise ConfigError(f"clip level must be > 0, got {clip}")
    P = as_matrix(P)
    observed_phi = _observed(np.asarray(phi_hat, dtype=float), T)
    return _observed(P, T) / np.maximum(clip, observed_phi)


def normalize_weights(W: np.ndarray) -> np.ndarray:
    """Rescale to sum n; the self-normalized convention."""
    W = np.asarray(W, dtype=float)
    total = W.sum()
    if not total > 0:
        raise NoOverlapError("policy has no overlap with logged actions")
    return W * (len(W) / total)


def weights_nipw(P: AssignmentLike, T: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    return normalize_weights(weights_ipw(P, T, phi_hat))


def weights_ncipw(P: AssignmentLike, T: np.ndarray, phi_hat: np.ndarray, clip: float = DEFAULT_CLIP) -> np.ndarray:
    return normalize_weights(weights_cipw(P, T, phi_hat, clip))


def worst_case_cmse_bound(
    solution: WeightsSolution,
    mu_norm_sq: float,
    Lambda: np.ndarray,
    Sigma: np.ndarray
) -> float:
    """
    Upper bound on the conditional MSE of the weighted estimator.

    Imbalance terms are not divided by n, so the RKHS norm
    sum_t ||mu_t||^2 / gamma_t^2 enters as mu_norm_sq / n^2. The variance factor
    is the largest eigenvalue of Lambda^{+1/2} Sigma Lambda^{+1/2}, which needs
    ker(Lambda) inside ker(Sigma).
    """
    n = solution.n
    evals, evecs = eigh(np.asarray(Lambda, dtype=float))
    keep = evals > 1e-12 * max(evals.max(initial=0.0), 1.0)
    root_pinv = (evecs[:, keep] / np.sqrt(evals[keep])) @ evecs[:, keep].T
    ratio = float(eigh(root_pinv @ Sigma @ root_pinv, eigvals_only=True).max(initial=0.0))
    return max(mu_norm_sq / n ** 2, ratio) * solution.objective


def balanced_weights(
    ds: LoggedDataset,
    P: AssignmentLike,
    cfg: BalanceConfig,
    options: Optional[SolverOptions] = None,
    grams: Optional[Sequence[GramLike]] = None
) -> WeightsSolution:
    """Solve for the balancing weights of P on the logged sample."""
    if grams is None:
        grams = build_grams(cfg, ds.X, ds.m)
    return solve_weights(P, ds.T, cfg, grams, options)


def _resolve_assignment(policy: Union[Policy, PolicyAssignment, np.ndarray], ds: LoggedDataset) -> PolicyAssignment:
    if isinstance(policy, PolicyAssignment):
        assignment = policy
    elif isinstance(policy, np.ndarray):
        assignment = PolicyAssignment(P=policy)
    else:
        assignment = assignment_of(policy, ds.X, ds.m)
    if assignment.P.shape != (ds.n, ds.m):
        raise DataError(f"assignment has shape {assignment.P.shape}, expected ({ds.n}, {ds.m})")
    return assignment


def _base_notes(ds: LoggedDataset) -> List[str]:
    return ["variance undefined (n=1)"] if ds.n == 1 else []


def evaluate_balanced(
    ds: LoggedDataset,
    policy: Union[Policy, PolicyAssignment, np.ndarray],
    cfg: BalanceConfig,
    mu_hat: Optional[np.ndarray] = None,
    options: Optional[SolverOptions] = None,
    grams: Optional[Sequence[GramLike]] = None,
    include_weights: bool = True
) -> EvaluationReport:
    """
    Balanced policy evaluation.

    Args:
        ds: Logged data
        policy: Policy object or its assignment on ds.X
        cfg: Objective configuration
        mu_hat: Optional n x m outcome predictions; enables the DR form
        options: Solver options
        grams: Precomputed Gram matrices
        include_weights: Whether to copy W into the report

    Returns:
        EvaluationReport with solver diagnostics
    """
    assignment = _resolve_assignment(policy, ds)
    solution = balanced_weights(ds, assignment, cfg, options, grams)
    dr_used = mu_hat is not None
    if dr_used:
        estimate = tau_dr(solution.W, assignment, mu_hat, ds)
    else:
        estimate = tau_weighted(solution.W, ds.Y)

    logger.info(
        f"Balanced evaluation: estimate={estimate:.6g}, support={solution.support}/{ds.n}",
        extra={'event': 'evaluation', 'method': 'balanced-dr' if dr_used else 'balanced'}
    )
    return EvaluationReport(
        estimate=estimate,
        method=EstimatorMethod.BALANCED_DR if dr_used else EstimatorMethod.BALANCED,
        n=ds.n,
        weights_support=solution.support,
        weights=solution.W.tolist() if include_weights else None,
        objective_parts=solution.to_parts(),
        dr_used=dr_used,
        notes=_base_notes(ds)
    )


def propensity_weights(
    method: EstimatorMethod,
    P: AssignmentLike,
    T: np.ndarray,
    phi_hat: np.ndarray,
    clip: float = DEFAULT_CLIP
) -> np.ndarray:
    """Weights for the IPW family; DR uses plain IPW weights."""
    if method in (EstimatorMethod.IPW, EstimatorMethod.DR):
        return weights_ipw(P, T, phi_hat)
    if method == EstimatorMethod.NIPW:
        return weights_nipw(P, T, phi_hat)
    if method == EstimatorMethod.CIPW:
        return weights_cipw(P, T, phi_hat, clip)
    if method == EstimatorMethod.NCIPW:
        return weights_ncipw(P, T, phi_hat, clip)
    raise ConfigError(f"method {method.value} does not use propensity weights")


def balance_diagnostics(
    W: np.ndarray,
    P: AssignmentLike,
    ds: LoggedDataset,
    cfg: BalanceConfig,
    grams: Optional[Sequence[GramLike]] = None
) -> ObjectiveParts:
    """
    Worst-case CMSE decomposition of arbitrary weights.

    Puts propensity weights on the same scale as the balanced solution.
    """
    if grams is None:
        grams = build_grams(cfg, ds.X, ds.m)
    total, per_arm, variance_term = objective(W, P, ds.T, cfg, grams)
    return ObjectiveParts(
        objective=max(total, 0.0),
        imbalance_sq=[float(v) for v in per_arm],
        imbalance=[float(np.sqrt(max(v, 0.0))) for v in per_arm],
        variance_term=max(variance_term, 0.0)
    )


def estimate(
    method: Union[EstimatorMethod, str],
    ds: LoggedDataset,
    policy: Union[Policy, PolicyAssignment, np.ndarray],
    phi_hat: Optional[np.ndarray] = None,
    mu_hat: Optional[np.ndarray] = None,
    clip: float = DEFAULT_CLIP,
    cfg: Optional[BalanceConfig] = None,
    options: Optional[SolverOptions] = None,
    grams: Optional[Sequence[GramLike]] = None
) -> EvaluationReport:
    """
    Evaluate a policy with any supported method.

    Weighting methods combined with ``mu_hat`` give their doubly robust
    version; ``dr`` and ``balanced-dr`` require it, ``direct`` uses it alone.
    With ``cfg``, propensity-weighted reports also carry the objective
    decomposition of their weights.

    Raises:
        ConfigError: a required nuisance input is missing
    """
    method = EstimatorMethod(method)
    assignment = _resolve_assignment(policy, ds)

    if method in (EstimatorMethod.BALANCED, EstimatorMethod.BALANCED_DR):
        if method == EstimatorMethod.BALANCED_DR and mu_hat is None:
            raise ConfigError("balanced-dr requires an outcome model")
        return evaluate_balanced(
            ds, assignment, cfg or BalanceConfig(),
            mu_hat=mu_hat if method == EstimatorMethod.BALANCED_DR else None,
            options=options, grams=grams
        )

    if method == EstimatorMethod.DIRECT:
        if mu_hat is None:
            raise ConfigError("direct requires an outcome model")
        return EvaluationReport(
            estimate=tau_direct(assignment, mu_hat), method=method, n=ds.n,
            dr_used=False, notes=_base_notes(ds)
        )

    if phi_hat is None:
        raise ConfigError(f"{method.value} requires propensities")
    if method == EstimatorMethod.DR and mu_hat is None:
        raise ConfigError("dr requires an outcome model")

    W = propensity_weights(method, assignment, ds.T, phi_hat, clip)
    dr_used = mu_hat is not None
    value = tau_dr(W, assignment, mu_hat, ds) if dr_used else tau_weighted(W, ds.Y)
    clipped = method in (EstimatorMethod.CIPW, EstimatorMethod.NCIPW)
    parts = None if cfg is None else balance_diagnostics(W, assignment, ds, cfg, grams)
    return EvaluationReport(
        estimate=value,
        method=method,
        n=ds.n,
        weights_support=int(np.sum(W > active_threshold(ds.n))),
        weights=W.tolist(),
        objective_parts=parts,
        dr_used=dr_used,
        clip=clip if clipped else None,
        notes=_base_notes(ds)
    )

