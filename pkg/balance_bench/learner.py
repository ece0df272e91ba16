"""
Policy learners over the softmax-linear class.

Each learner minimizes a smooth (or piecewise smooth) function of the
assignment matrix with BFGS from several random starts:

* balanced / balanced-dr: tau of the balancing weights W*(pi), plus an
  optional lambda * E regularizer, with implicit gradients through the QP;
* ipw-logit / dr-logit: the IPW and DR estimates, linear in pi_{T_i}(X_i);
* direct: greedy argmin of an outcome model (no optimization).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize

from .balance import (
    BalanceConfig,
    SolverOptions,
    WeightsSolution,
    assemble_qp,
    build_grams,
    resolve_config,
    solve_weights,
)
from .data import LoggedDataset, PolicyAssignment
from .errors import ConfigError, DataError, LearningError, NumericalError, ZeroPropensityError
from .estimators import tau_direct, tau_dr, tau_weighted
from .gradients import chain_to_beta, implicit_gradients
from .kernels import GramCache
from .policies import GreedyPolicy, LogitPolicy, direct_policy, softmax_assignment
from .schema import LearnedPolicyReport, LearnerMethod, TraceEntry
from .utils.logging import log_restart_end
from .utils.timers import time_operation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnerConfig:
    """
    Outer optimization settings.

    Attributes:
        lambda_reg: Weight of the E regularizer (>= 0)
        restarts: Number of random BFGS starts (>= 1)
        grad_tol: BFGS gradient tolerance (infinity norm)
        max_iters: BFGS iteration limit per restart
        seed: Master seed for the restart streams
        init_scale: Standard deviation of the Gaussian beta initialization
        n_jobs: Restarts run concurrently on this many threads
        solver_tol: KKT tolerance of the inner QP
    """
    lambda_reg: float = 0.0
    restarts: int = 10
    grad_tol: float = 1e-6
    max_iters: int = 200
    seed: int = 0
    init_scale: float = 1.0
    n_jobs: int = 1
    solver_tol: float = 1e-7

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ConfigError(f"learner.restarts must be >= 1, got {self.restarts}")
        if self.lambda_reg < 0:
            raise ConfigError(f"learner.lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.init_scale < 0:
            raise ConfigError(f"learner.init_scale must be >= 0, got {self.init_scale}")
        if self.max_iters < 1:
            raise ConfigError(f"learner.max_iters must be >= 1, got {self.max_iters}")


@dataclass
class LearningResult:
    """Best restart plus the iteration trace of that restart."""
    method: LearnerMethod
    policy: object
    objective: float
    trace: List[TraceEntry] = field(default_factory=list)
    restart_objectives: List[float] = field(default_factory=list)
    converged: bool = False

    def to_report(self) -> LearnedPolicyReport:
        beta = self.policy.beta.tolist() if isinstance(self.policy, LogitPolicy) else None
        return LearnedPolicyReport(
            method=self.method,
            beta=beta,
            objective=self.objective,
            restart_objectives=self.restart_objectives,
            converged=self.converged
        )


Evaluation = Tuple[float, np.ndarray, Optional[int]]


class AssignmentObjective:
    """
    Objective in beta built from a function of the assignment matrix.

    Subclasses implement ``evaluate_assignment(P) -> (value, dvalue/dP, active)``.
    Evaluations are memoized by beta so the BFGS callback can read them back.
    """

    def __init__(self, ds: LoggedDataset):
        self.ds = ds
        self.shape = (ds.m, ds.d + 1)
        self.evaluations = {}
        self.calls = 0

    def evaluate_assignment(self, P: PolicyAssignment) -> Evaluation:
        raise NotImplementedError

    def __call__(self, flat_beta: np.ndarray) -> Tuple[float, np.ndarray]:
        key = flat_beta.tobytes()
        cached = self.evaluations.get(key)
        if cached is None:
            self.calls += 1
            P = softmax_assignment(flat_beta.reshape(self.shape), self.ds.X)
            try:
                value, grad_P, active = self.evaluate_assignment(P)
                grad = chain_to_beta(grad_P, P, self.ds.X).ravel()
            except NumericalError as exc:
                logger.warning(f"Objective evaluation failed: {exc}",
                               extra={'event': 'objective_failure'})
                value, grad, active = np.inf, np.zeros(flat_beta.size), None
            cached = (float(value), grad, active)
            self.evaluations[key] = cached
        return cached[0], cached[1].copy()

    def lookup(self, flat_beta: np.ndarray) -> Evaluation:
        if flat_beta.tobytes() not in self.evaluations:
            self(flat_beta)
        return self.evaluations[flat_beta.tobytes()]


class BalancedObjective(AssignmentObjective):
    """tau of W*(pi) plus lambda * E, warm-starting each QP from the last one."""

    def __init__(
        self,
        ds: LoggedDataset,
        cfg: BalanceConfig,
        lambda_reg: float = 0.0,
        mu_hat: Optional[np.ndarray] = None,
        grams=None,
        solver_tol: float = 1e-7
    ):
        super().__init__(ds)
        self.cfg = cfg
        self.lambda_reg = lambda_reg
        self.mu_hat = None if mu_hat is None else np.asarray(mu_hat, dtype=float)
        self.grams = grams if grams is not None else build_grams(cfg, ds.X, ds.m)
        self.solver_tol = solver_tol
        self.last_solution: Optional[WeightsSolution] = None
        if self.mu_hat is None:
            self.residuals = ds.Y
        else:
            self.residuals = ds.Y - self.mu_hat[np.arange(ds.n), ds.T]

    def solve(self, P: PolicyAssignment) -> WeightsSolution:
        warm = None if self.last_solution is None else self.last_solution.W
        solution = solve_weights(
            P, self.ds.T, self.cfg, self.grams,
            SolverOptions(tol=self.solver_tol, warm_start=warm)
        )
        self.last_solution = solution
        return solution

    def value(self, P: PolicyAssignment, solution: WeightsSolution) -> float:
        if self.mu_hat is None:
            tau = tau_weighted(solution.W, self.ds.Y)
        else:
            tau = tau_dr(solution.W, P, self.mu_hat, self.ds)
        return tau + self.lambda_reg * float(np.sqrt(max(solution.objective, 0.0)))

    def evaluate_assignment(self, P: PolicyAssignment) -> Evaluation:
        solution = self.solve(P)
        qp = assemble_qp(P, self.ds.T, self.cfg, self.grams)
        d_tau, d_reg = implicit_gradients(
            solution, self.residuals, P, self.ds.T, self.cfg, self.grams, qp, mu_hat=self.mu_hat
        )
        return self.value(P, solution), d_tau + self.lambda_reg * d_reg, solution.support


def _observed_propensity(ds: LoggedDataset, phi_hat: np.ndarray) -> np.ndarray:
    phi_hat = np.asarray(phi_hat, dtype=float)
    if phi_hat.shape != (ds.n, ds.m):
        raise DataError(f"propensities have shape {phi_hat.shape}, expected ({ds.n}, {ds.m})")
    observed = phi_hat[np.arange(ds.n), ds.T]
    bad = np.flatnonzero(~(observed > 0))
    if bad.size:
        raise ZeroPropensityError(f"zero propensity on observed arm at row {int(bad[0])}")
    return observed


class IPWObjective(AssignmentObjective):
    """(1/n) sum Y_i pi_{T_i}(X_i) / phi_hat_{T_i}(X_i), optionally doubly robust."""

    def __init__(self, ds: LoggedDataset, phi_hat: np.ndarray, mu_hat: Optional[np.ndarray] = None):
        super().__init__(ds)
        self.observed_phi = _observed_propensity(ds, phi_hat)
        self.mu_hat = None if mu_hat is None else np.asarray(mu_hat, dtype=float)
        residuals = ds.Y if self.mu_hat is None else ds.Y - self.mu_hat[np.arange(ds.n), ds.T]
        onehot = ds.treatment_indicators()
        self.linear = onehot * (residuals / (ds.n * self.observed_phi))[:, None]
        if self.mu_hat is not None:
            self.linear = self.linear + self.mu_hat / ds.n

    def evaluate_assignment(self, P: PolicyAssignment) -> Evaluation:
        return float(np.sum(self.linear * P.P)), self.linear, None


def _restart(
    objective_factory: Callable[[], AssignmentObjective],
    beta0: np.ndarray,
    lcfg: LearnerConfig,
    method: LearnerMethod,
    index: int
) -> Tuple[float, np.ndarray, List[TraceEntry], bool]:
    objective = objective_factory()
    trace: List[TraceEntry] = []

    def record(xk: np.ndarray) -> None:
        value, grad, active = objective.lookup(xk)
        trace.append(TraceEntry(
            iteration=len(trace) + 1,
            objective=value,
            grad_norm=float(np.linalg.norm(grad)),
            active_set_size=active
        ))

    with time_operation("learner_restart"):
        result = minimize(
            objective,
            beta0.ravel(),
            method='BFGS',
            jac=True,
            callback=record,
            options={'gtol': lcfg.grad_tol, 'maxiter': lcfg.max_iters}
        )

    final_value, _, _ = objective.lookup(result.x)
    if not trace:
        record(result.x)
    log_restart_end(
        logger, method.value, index, final_value, int(result.nit), bool(result.success),
        evaluations=objective.calls
    )
    return final_value, result.x.reshape(beta0.shape), trace, bool(result.success)


def initial_betas(m: int, d: int, lcfg: LearnerConfig) -> List[np.ndarray]:
    """One Gaussian start per restart from independent child seeds."""
    streams = np.random.SeedSequence(lcfg.seed).spawn(lcfg.restarts)
    return [
        np.random.default_rng(stream).normal(0.0, lcfg.init_scale, size=(m, d + 1))
        for stream in streams
    ]


def run_restarts(
    objective_factory: Callable[[], AssignmentObjective],
    ds: LoggedDataset,
    lcfg: LearnerConfig,
    method: LearnerMethod
) -> LearningResult:
    """
    BFGS from every start; the lowest final objective wins, ties to the first.

    Raises:
        LearningError: no restart reached a finite objective
    """
    starts = initial_betas(ds.m, ds.d, lcfg)
    runs = Parallel(n_jobs=lcfg.n_jobs, prefer="threads")(
        delayed(_restart)(objective_factory, beta0, lcfg, method, k)
        for k, beta0 in enumerate(starts)
    )
    restart_objectives = [run[0] for run in runs]
    finite = [k for k, value in enumerate(restart_objectives) if np.isfinite(value)]
    if not finite:
        raise LearningError(f"all {lcfg.restarts} {method.value} restarts failed")
    best = min(finite, key=lambda k: (restart_objectives[k], k))
    value, beta, trace, converged = runs[best]

    logger.info(
        f"{method.value} learner: best restart {best} objective={value:.6g}",
        extra={'event': 'learner_end', 'method': method.value, 'best_restart': best}
    )
    return LearningResult(
        method=method,
        policy=LogitPolicy(beta=beta),
        objective=value,
        trace=trace,
        restart_objectives=restart_objectives,
        converged=converged
    )


def _balanced(
    ds: LoggedDataset,
    cfg: BalanceConfig,
    lcfg: LearnerConfig,
    mu_hat: Optional[np.ndarray],
    method: LearnerMethod
) -> LearningResult:
    cfg = resolve_config(cfg, ds.X)
    grams = build_grams(cfg, ds.X, ds.m, GramCache())

    def factory() -> AssignmentObjective:
        return BalancedObjective(ds, cfg, lcfg.lambda_reg, mu_hat, grams, lcfg.solver_tol)

    return run_restarts(factory, ds, lcfg, method)


def learn_balanced(ds: LoggedDataset, cfg: BalanceConfig, lcfg: LearnerConfig) -> LearningResult:
    """Minimize tau_{W*(pi)} + lambda * E over logit policies."""
    return _balanced(ds, cfg, lcfg, None, LearnerMethod.BALANCED)


def learn_balanced_dr(
    ds: LoggedDataset,
    cfg: BalanceConfig,
    lcfg: LearnerConfig,
    mu_hat: np.ndarray
) -> LearningResult:
    """Doubly robust version: tau_{W*(pi), mu_hat} + lambda * E."""
    return _balanced(ds, cfg, lcfg, mu_hat, LearnerMethod.BALANCED_DR)


def learn_ipw_logit(ds: LoggedDataset, phi_hat: np.ndarray, lcfg: LearnerConfig) -> LearningResult:
    """Minimize the IPW estimate over logit policies."""
    _observed_propensity(ds, phi_hat)
    return run_restarts(lambda: IPWObjective(ds, phi_hat), ds, lcfg, LearnerMethod.IPW_LOGIT)


def learn_dr_logit(
    ds: LoggedDataset,
    phi_hat: np.ndarray,
    mu_hat: np.ndarray,
    lcfg: LearnerConfig
) -> LearningResult:
    """Minimize the DR estimate with IPW residual weights over logit policies."""
    _observed_propensity(ds, phi_hat)
    return run_restarts(lambda: IPWObjective(ds, phi_hat, mu_hat), ds, lcfg, LearnerMethod.DR_LOGIT)


def learn_direct(ds: LoggedDataset, model) -> LearningResult:
    """Greedy policy over an outcome model; its objective is the in-sample plug-in value."""
    policy: GreedyPolicy = direct_policy(model)
    P = PolicyAssignment(P=policy.probabilities(ds.X))
    return LearningResult(
        method=LearnerMethod.DIRECT,
        policy=policy,
        objective=tau_direct(P, model.predict(ds.X)),
        converged=True
    )
