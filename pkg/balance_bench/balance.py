"""
Worst-case CMSE objective and the balancing-weights QP.

For weights W on the scaled simplex {W >= 0, sum(W) = n} the objective is

    E^2(W) = sum_t gamma_t^2 z_t^T K_t z_t + (1/n^2) W^T Lambda W,
    z_t[i] = W_i [T_i = t] - P[i, t],

which equals W^T Q W - 2 c^T W + const. The minimizer is found with a primal
active-set method on the simplex.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve, lstsq

from .data import AssignmentLike, as_matrix
from .errors import ConfigError, SolverConvergenceError, UnsupportedExponentError
from .kernels import GramCache, GramMatrix, KernelSpec, gram_matrix, resolve_spec
from .schema import ObjectiveParts
from .utils.logging import log_solve_end
from .utils.timers import time_operation

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
ACTIVE_THRESHOLD = 1e-8
SUM_TOL = 1e-8

GramLike = Union[GramMatrix, np.ndarray]


def _K(gram: GramLike) -> np.ndarray:
    return gram.K if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=float)


@dataclass(frozen=True)
class BalanceConfig:
    """
    Objective configuration.

    Attributes:
        gamma: Scalar or per-arm scales gamma_t > 0
        lam: Scalar kappa (meaning kappa * I) or an explicit n x n PSD matrix
        p: Norm exponent; only 2 is implemented
        kernel: Shared kernel spec
        arm_kernels: Optional per-arm overrides of ``kernel``
    """
    gamma: Union[float, Sequence[float]] = 1.0
    lam: Union[float, np.ndarray] = 1.0
    p: float = 2.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    arm_kernels: Optional[Tuple[KernelSpec, ...]] = None

    def __post_init__(self) -> None:
        gammas = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if np.any(~np.isfinite(gammas)) or np.any(gammas <= 0):
            raise ConfigError(f"balance.gamma must be positive, got {self.gamma}")
        if np.ndim(self.lam) == 0:
            if float(self.lam) < 0:
                raise ConfigError(f"balance.lambda must be >= 0, got {self.lam}")
        else:
            Lam = np.asarray(self.lam, dtype=float)
            if Lam.ndim != 2 or Lam.shape[0] != Lam.shape[1]:
                raise ConfigError(f"lambda matrix must be square, got shape {Lam.shape}")
            if not np.allclose(Lam, Lam.T, atol=1e-10):
                raise ConfigError("lambda matrix must be symmetric")
            if np.linalg.eigvalsh(Lam).min() < -1e-10:
                raise ConfigError("lambda matrix must be positive semidefinite")

    def require_supported(self) -> None:
        if self.p != 2:
            raise UnsupportedExponentError(self.p)

    def gammas(self, m: int) -> np.ndarray:
        gammas = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if gammas.size == 1:
            return np.full(m, float(gammas[0]))
        if gammas.size != m:
            raise ConfigError(f"balance.gamma has {gammas.size} entries for {m} arms")
        return gammas

    def lambda_matrix(self, n: int) -> np.ndarray:
        if np.ndim(self.lam) == 0:
            return float(self.lam) * np.eye(n)
        Lam = np.asarray(self.lam, dtype=float)
        if Lam.shape != (n, n):
            raise ConfigError(f"lambda matrix has shape {Lam.shape}, expected ({n}, {n})")
        return Lam

    def kernel_for(self, t: int) -> KernelSpec:
        if self.arm_kernels is None:
            return self.kernel
        if t >= len(self.arm_kernels):
            raise ConfigError(f"no kernel configured for arm {t + 1}")
        return self.arm_kernels[t]


def build_grams(
    cfg: BalanceConfig,
    X: np.ndarray,
    m: int,
    cache: Optional[GramCache] = None
) -> List[GramMatrix]:
    """Per-arm Gram matrices on X; arms sharing a spec share the matrix."""
    grams: List[GramMatrix] = []
    by_spec = {}
    for t in range(m):
        spec = cfg.kernel_for(t)
        key = spec.cache_key()
        if key not in by_spec:
            by_spec[key] = cache.get(spec, X) if cache is not None else gram_matrix(spec, X)
        grams.append(by_spec[key])
    return grams


def arm_residual(W: np.ndarray, P_t: np.ndarray, T: np.ndarray, t: int) -> np.ndarray:
    """z_i = W_i [T_i = t] - P_t[i]."""
    return np.asarray(W, dtype=float) * (np.asarray(T) == t) - np.asarray(P_t, dtype=float)


def imbalance_sq(W: np.ndarray, P_t: np.ndarray, T: np.ndarray, K_t: GramLike, t: int) -> float:
    """Squared worst-case imbalance z^T K_t z for arm t."""
    z = arm_residual(W, P_t, T, t)
    return float(z @ _K(K_t) @ z)


def objective(
    W: np.ndarray,
    P: AssignmentLike,
    T: np.ndarray,
    cfg: BalanceConfig,
    grams: Sequence[GramLike]
) -> Tuple[float, np.ndarray, float]:
    """
    Evaluate the objective.

    Returns:
        (total, per-arm imbalance_sq, variance term)
    """
    cfg.require_supported()
    P = as_matrix(P)
    W = np.asarray(W, dtype=float)
    n, m = P.shape
    gammas = cfg.gammas(m)
    per_arm = np.array([imbalance_sq(W, P[:, t], T, grams[t], t) for t in range(m)])
    variance_term = float(W @ cfg.lambda_matrix(n) @ W) / n ** 2
    total = float(gammas ** 2 @ per_arm) + variance_term
    return total, per_arm, variance_term


@dataclass(frozen=True)
class QuadraticProgram:
    """E^2(W) = W^T Q W - 2 c^T W + const."""
    Q: np.ndarray
    c: np.ndarray
    const: float

    def value(self, W: np.ndarray) -> float:
        return float(W @ self.Q @ W - 2.0 * self.c @ W + self.const)

    def gradient(self, W: np.ndarray) -> np.ndarray:
        return 2.0 * self.Q @ W - 2.0 * self.c


def assemble_qp(
    P: AssignmentLike,
    T: np.ndarray,
    cfg: BalanceConfig,
    grams: Sequence[GramLike]
) -> QuadraticProgram:
    """Expand the objective into (Q, c, const)."""
    cfg.require_supported()
    P = as_matrix(P)
    T = np.asarray(T)
    n, m = P.shape
    gammas = cfg.gammas(m)
    Q = cfg.lambda_matrix(n) / n ** 2
    c = np.zeros(n)
    const = 0.0
    for t in range(m):
        K = _K(grams[t])
        mask = (T == t).astype(float)
        KP = K @ P[:, t]
        Q = Q + gammas[t] ** 2 * np.outer(mask, mask) * K
        c += gammas[t] ** 2 * mask * KP
        const += gammas[t] ** 2 * float(P[:, t] @ KP)
    return QuadraticProgram(Q=0.5 * (Q + Q.T), c=c, const=const)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = DEFAULT_TOL
    max_iters: Optional[int] = None
    warm_start: Optional[np.ndarray] = None

    def iteration_limit(self, n: int) -> int:
        return self.max_iters if self.max_iters is not None else max(1000, 20 * n)


@dataclass(frozen=True)
class WeightsSolution:
    """Optimal balancing weights with diagnostics."""
    W: np.ndarray
    objective: float
    imbalance_sq: np.ndarray
    variance_term: float
    active_set: np.ndarray
    kkt_residual: float
    iterations: int
    nu: float = 0.0
    duals: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.W.shape[0])

    @property
    def imbalance(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.imbalance_sq, 0.0))

    @property
    def support(self) -> int:
        return int(self.active_set.sum())

    def to_parts(self) -> ObjectiveParts:
        return ObjectiveParts(
            objective=max(self.objective, 0.0),
            imbalance_sq=[float(v) for v in self.imbalance_sq],
            imbalance=[float(v) for v in self.imbalance],
            variance_term=max(self.variance_term, 0.0),
            kkt_residual=self.kkt_residual,
            iterations=self.iterations
        )


def active_threshold(n: int) -> float:
    return ACTIVE_THRESHOLD * n


def multipliers(W: np.ndarray, free: np.ndarray, qp: QuadraticProgram) -> Tuple[float, np.ndarray]:
    """Equality multiplier nu and bound multipliers s consistent with the free set."""
    g = qp.gradient(W)
    nu = -float(np.mean(g[free])) if np.any(free) else -float(np.min(g))
    s = g + nu
    s[free] = 0.0
    return nu, s


def kkt_residual(
    W: np.ndarray,
    duals: Tuple[float, np.ndarray],
    Q: np.ndarray,
    c: np.ndarray
) -> float:
    """
    Max-norm KKT violation for min W^T Q W - 2 c^T W s.t. 1^T W = n, W >= 0.

    Args:
        W: Candidate weights
        duals: (nu, s) for the equality and the bound constraints
        Q, c: Quadratic program data

    Returns:
        max of stationarity, complementarity, dual and primal infeasibility
    """
    W = np.asarray(W, dtype=float)
    nu, s = duals
    s = np.asarray(s, dtype=float)
    n = W.shape[0]
    g = 2.0 * Q @ W - 2.0 * c
    stationarity = np.max(np.abs(g + nu - s), initial=0.0)
    complementarity = np.max(np.abs(s * W), initial=0.0)
    dual_infeasibility = np.max(np.maximum(-s, 0.0), initial=0.0)
    primal_infeasibility = max(
        float(np.max(np.maximum(-W, 0.0), initial=0.0)),
        abs(float(W.sum()) - n) / max(n, 1)
    )
    return float(max(stationarity, complementarity, dual_infeasibility, primal_infeasibility))


def _solve_kkt(Q_FF: np.ndarray, c_F: np.ndarray, n: int) -> Tuple[np.ndarray, float]:
    """Equality-constrained minimizer on the free set: [2Q 1; 1^T 0][w; nu] = [2c; n]."""
    k = Q_FF.shape[0]
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = 2.0 * Q_FF
    A[:k, k] = 1.0
    A[k, :k] = 1.0
    rhs = np.concatenate([2.0 * c_F, [float(n)]])
    try:
        with warnings.catch_warnings(), np.errstate(all='ignore'):
            warnings.simplefilter('ignore', LinAlgWarning)
            factors = lu_factor(A, check_finite=False)
            sol = lu_solve(factors, rhs)
            sol += lu_solve(factors, rhs - A @ sol)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
    except (np.linalg.LinAlgError, ValueError):
        sol = lstsq(A, rhs)[0]
    return sol[:k], float(sol[k])


def _initial_point(n: int, warm_start: Optional[np.ndarray]) -> np.ndarray:
    if warm_start is not None:
        W0 = np.asarray(warm_start, dtype=float).ravel()
        if W0.shape[0] == n and np.all(np.isfinite(W0)):
            W0 = np.maximum(W0, 0.0)
            total = W0.sum()
            if total > 0:
                return W0 * (n / total)
        logger.debug("Ignoring unusable warm start", extra={'event': 'warm_start_rejected', 'n': n})
    return np.ones(n)


def _active_set_loop(
    qp: QuadraticProgram,
    W: np.ndarray,
    tol: float,
    max_iters: int
) -> Tuple[np.ndarray, np.ndarray, int, bool]:
    n = W.shape[0]
    free = W > 0
    zero_tol = 1e-14 * n
    for iteration in range(1, max_iters + 1):
        F = np.flatnonzero(free)
        w_F, _ = _solve_kkt(qp.Q[np.ix_(F, F)], qp.c[F], n)

        if np.all(w_F >= 0):
            W = np.zeros(n)
            W[F] = w_F
            _, s = multipliers(W, free, qp)
            candidates = np.where(free, np.inf, s)
            j = int(np.argmin(candidates))
            if candidates[j] >= -tol:
                return W, free, iteration, True
            free[j] = True
            continue

        # step toward w_F until the first free weight hits zero
        step = w_F - W[F]
        shrinking = step < 0
        ratios = -W[F][shrinking] / step[shrinking]
        alpha = min(1.0, float(ratios.min()))
        W_F = W[F] + alpha * step
        blocked = W_F <= zero_tol
        blocked[np.flatnonzero(shrinking)[np.argmin(ratios)]] = True
        W_F[blocked] = 0.0
        W = np.zeros(n)
        W[F] = W_F
        free[F[blocked]] = False
        if not np.any(free):
            free[int(np.argmax(W))] = True

    return W, free, max_iters, False


def _finalize(W: np.ndarray, free: np.ndarray, qp: QuadraticProgram) -> Tuple[np.ndarray, float, np.ndarray, float]:
    n = W.shape[0]
    W = np.maximum(W, 0.0)
    W *= n / W.sum()
    nu, s = multipliers(W, free & (W > 0), qp)
    residual = kkt_residual(W, (nu, s), qp.Q, qp.c)
    return W, nu, s, residual


def solve_weights(
    P: AssignmentLike,
    T: np.ndarray,
    cfg: BalanceConfig,
    grams: Sequence[GramLike],
    options: Optional[SolverOptions] = None
) -> WeightsSolution:
    """
    Minimize the objective over the scaled simplex.

    Args:
        P: n x m policy assignment
        T: 0-based treatments
        cfg: Objective configuration
        grams: Per-arm Gram matrices on the logged covariates
        options: Tolerance, iteration limit and optional warm start

    Returns:
        WeightsSolution

    Raises:
        SolverConvergenceError: iteration limit reached above tolerance
    """
    options = options or SolverOptions()
    P = as_matrix(P)
    n = P.shape[0]

    with time_operation("solve_weights"):
        qp = assemble_qp(P, T, cfg, grams)
        max_iters = options.iteration_limit(n)
        W0 = _initial_point(n, options.warm_start)
        W, free, iterations, converged = _active_set_loop(qp, W0, options.tol, max_iters)
        W, nu, s, residual = _finalize(W, free, qp)

        if residual > options.tol and converged:
            # one more pass from the current point tightens the equality solve
            W, free, extra, converged = _active_set_loop(qp, W, options.tol, max_iters)
            iterations += extra
            W, nu, s, residual = _finalize(W, free, qp)

        if residual > options.tol:
            raise SolverConvergenceError(
                "weights QP did not converge", best_iterate=W, residual=residual, iterations=iterations
            )

    total, per_arm, variance_term = objective(W, P, T, cfg, grams)
    active = W > active_threshold(n)
    log_solve_end(logger, n, iterations, total, residual, int(active.sum()))
    return WeightsSolution(
        W=W,
        objective=total,
        imbalance_sq=per_arm,
        variance_term=variance_term,
        active_set=active,
        kkt_residual=residual,
        iterations=iterations,
        nu=nu,
        duals=s
    )


def resolve_config(cfg: BalanceConfig, X: np.ndarray) -> BalanceConfig:
    """Pin 'sample' kernel scales to the covariance of X."""
    arm_kernels = None
    if cfg.arm_kernels is not None:
        arm_kernels = tuple(resolve_spec(spec, X) for spec in cfg.arm_kernels)
    return BalanceConfig(
        gamma=cfg.gamma, lam=cfg.lam, p=cfg.p,
        kernel=resolve_spec(cfg.kernel, X), arm_kernels=arm_kernels
    )
