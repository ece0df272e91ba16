"""
Replication harnesses: fixed-X evaluation, fresh-draw learning and
convergence-rate experiments.

Replications are independent; each gets its own RNG stream spawned from the
master seed and the pool is run through joblib.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .balance import BalanceConfig, SolverOptions, active_threshold, build_grams, resolve_config, solve_weights
from .data import LoggedDataset, PolicyAssignment, TrueEnvironment, assignment_of
from .errors import BalanceBenchError, ConfigError, NumericalError
from .estimators import DEFAULT_CLIP, propensity_weights, tau_direct, tau_dr, tau_weighted
from .kernels import KernelSpec
from .learner import (
    LearnerConfig,
    learn_balanced,
    learn_balanced_dr,
    learn_direct,
    learn_dr_logit,
    learn_ipw_logit,
)
from .models import crossfit, fit_gaussian_discriminant, fit_kernel_ridge_per_arm, outcome_fitter
from .schema import (
    EstimatorMethod,
    LearnerMethod,
    MethodSummary,
    RateReport,
    ReplicationReport,
    SlopeFit,
)
from .simulation import (
    DEFAULT_PAPE_SAMPLES,
    Example1Spec,
    example1_environment,
    gen_example1,
    kernel_expansion_environment,
    optimal_policy,
    redraw_logged,
    regret,
    sample_logged,
    sape,
)
from .utils.logging import log_replication_progress

logger = logging.getLogger(__name__)

EVALUATION_METHODS = (
    EstimatorMethod.BALANCED,
    EstimatorMethod.IPW,
    EstimatorMethod.NIPW,
    EstimatorMethod.CIPW,
    EstimatorMethod.NCIPW,
    EstimatorMethod.DIRECT,
)
LEARNING_METHODS = (
    LearnerMethod.BALANCED,
    LearnerMethod.BALANCED_DR,
    LearnerMethod.IPW_LOGIT,
    LearnerMethod.DR_LOGIT,
    LearnerMethod.DIRECT,
)
RATE_METHODS = ("balanced", "ipw")

# (vanilla, doubly robust, support); a missing column is None
Outcome = Tuple[Optional[float], Optional[float], Optional[int]]


@dataclass(frozen=True)
class NuisanceSettings:
    """How the per-replication nuisances are fitted."""
    kernel: KernelSpec = field(default_factory=KernelSpec)
    ridge: float = 0.1
    folds: int = 5
    clip: float = DEFAULT_CLIP


def spawn_seeds(seed: int, count: int) -> List[int]:
    """Independent integer seeds for ``count`` replications."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def _run_pool(
    task: Callable[[int, int], object],
    seeds: Sequence[int],
    n_jobs: int,
    mode: str
) -> List[object]:
    total = len(seeds)
    step = max(1, total // 10)
    results = []
    stream = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(task)(index, child) for index, child in enumerate(seeds)
    )
    for completed, result in enumerate(stream, start=1):
        results.append(result)
        if completed % step == 0 or completed == total:
            log_replication_progress(logger, mode, completed, total)
    return results


def summarize_errors(errors: Sequence[float]) -> Tuple[float, float, float]:
    """(rmse, bias, sd) with the population SD, so rmse^2 = bias^2 + sd^2."""
    errors = np.asarray(errors, dtype=float)
    bias = float(errors.mean())
    sd = float(errors.std())
    return float(np.sqrt(bias ** 2 + sd ** 2)), bias, sd


def evaluation_labels(methods: Sequence[EstimatorMethod]) -> List[str]:
    """Row labels in table order; propensity methods get a true and a fitted row."""
    labels = []
    for method in methods:
        if method.uses_propensity:
            labels.extend([f"{method.value}-true", f"{method.value}-est"])
        else:
            labels.append(method.value)
    return labels


def _evaluation_methods(methods: Optional[Sequence]) -> List[EstimatorMethod]:
    if methods is None:
        return list(EVALUATION_METHODS)
    resolved = [EstimatorMethod(method) for method in methods]
    unsupported = [m.value for m in resolved if m not in EVALUATION_METHODS]
    if unsupported:
        raise ConfigError(
            f"evaluation benchmark rows are {[m.value for m in EVALUATION_METHODS]}, got {unsupported}"
        )
    if not resolved:
        raise ConfigError("no evaluation methods requested")
    return resolved


def _weighting_outcome(W: np.ndarray, P: PolicyAssignment, mu_hat: np.ndarray, ds: LoggedDataset) -> Outcome:
    support = int(np.sum(W > active_threshold(ds.n)))
    return tau_weighted(W, ds.Y), tau_dr(W, P, mu_hat, ds), support


def _evaluation_replication(
    env: TrueEnvironment,
    X: np.ndarray,
    P: PolicyAssignment,
    methods: Sequence[EstimatorMethod],
    cfg: BalanceConfig,
    grams,
    settings: NuisanceSettings,
    options: SolverOptions,
    child_seed: int
) -> Dict[str, Optional[Outcome]]:
    rng = np.random.default_rng(child_seed)
    ds = redraw_logged(env, X, rng)
    outcomes: Dict[str, Optional[Outcome]] = {label: None for label in evaluation_labels(methods)}

    try:
        mu_hat = crossfit(
            ds, outcome_fitter("kernel-ridge", settings.kernel, settings.ridge),
            folds=settings.folds, seed=child_seed
        ).predictions
    except BalanceBenchError as exc:
        logger.warning(f"Outcome model failed: {exc}", extra={'event': 'replication_failure', 'stage': 'outcome'})
        return outcomes

    phi_true = env.propensities(X)
    phi_est: Optional[np.ndarray] = None
    if any(method.uses_propensity for method in methods):
        try:
            phi_est = fit_gaussian_discriminant(X, ds.T, ds.m).predict(X)
        except BalanceBenchError as exc:
            logger.warning(f"Propensity model failed: {exc}",
                           extra={'event': 'replication_failure', 'stage': 'propensity'})

    for method in methods:
        try:
            if method == EstimatorMethod.BALANCED:
                solution = solve_weights(P, ds.T, cfg, grams, options)
                outcomes[method.value] = _weighting_outcome(solution.W, P, mu_hat, ds)
            elif method == EstimatorMethod.DIRECT:
                outcomes[method.value] = (tau_direct(P, mu_hat), None, None)
            else:
                for suffix, phi in (("true", phi_true), ("est", phi_est)):
                    if phi is None:
                        continue
                    W = propensity_weights(method, P, ds.T, phi, settings.clip)
                    outcomes[f"{method.value}-{suffix}"] = _weighting_outcome(W, P, mu_hat, ds)
        except BalanceBenchError as exc:
            logger.warning(f"{method.value} failed in replication: {exc}",
                           extra={'event': 'replication_failure', 'method': method.value})
    return outcomes


def _evaluation_row(label: str, results: List[Dict[str, Optional[Outcome]]], target: float) -> MethodSummary:
    done = [r[label] for r in results if r.get(label) is not None]
    failures = len(results) - len(done)
    if not done:
        return MethodSummary(method=label, failures=failures)
    row = {'method': label, 'failures': failures}
    vanilla = [v for v, _, _ in done]
    row['rmse'], row['bias'], row['sd'] = summarize_errors(np.asarray(vanilla) - target)
    if done[0][1] is not None:
        row['dr_rmse'], row['dr_bias'], row['dr_sd'] = summarize_errors(
            np.asarray([dr for _, dr, _ in done]) - target
        )
    if done[0][2] is not None:
        supports = np.asarray([s for _, _, s in done], dtype=float)
        row['support_mean'] = float(supports.mean())
        row['support_sd'] = float(supports.std())
    return MethodSummary(**row)


def run_evaluation_benchmark(
    spec: Example1Spec = Example1Spec(),
    methods: Optional[Sequence] = None,
    reps: int = 200,
    seed: Optional[int] = None,
    cfg: BalanceConfig = BalanceConfig(),
    settings: NuisanceSettings = NuisanceSettings(),
    options: SolverOptions = SolverOptions(),
    n_jobs: int = 1
) -> ReplicationReport:
    """
    Evaluate the optimal policy on one fixed covariate draw over many (T, Y) redraws.

    X comes from ``spec.seed``; replication streams are spawned from ``seed``
    (default ``spec.seed``). Every replication fits a Gaussian discriminant
    propensity and a cross-fitted kernel ridge outcome model.

    Returns:
        ReplicationReport with vanilla and doubly robust error columns per row
    """
    if reps < 2:
        raise ConfigError(f"reps must be >= 2, got {reps}")
    methods = _evaluation_methods(methods)
    seed = spec.seed if seed is None else seed

    X = gen_example1(spec)[0].X
    env = example1_environment(spec.m, spec.sigma)
    P = assignment_of(optimal_policy(env), X, spec.m)
    target = sape(P, env.mu_matrix(X))
    cfg = resolve_config(cfg, X)
    grams = build_grams(cfg, X, spec.m)

    logger.info(
        f"Evaluation benchmark: n={spec.n}, reps={reps}, SAPE={target:.4f}",
        extra={'event': 'benchmark_start', 'mode': 'evaluation', 'reps': reps, 'seed': seed}
    )

    def task(index: int, child_seed: int):
        return _evaluation_replication(env, X, P, methods, cfg, grams, settings, options, child_seed)

    results = _run_pool(task, spawn_seeds(seed, reps), n_jobs, "evaluation")
    rows = [_evaluation_row(label, results, target) for label in evaluation_labels(methods)]
    return ReplicationReport(
        mode="evaluation", replications=reps, seed=seed, n=spec.n, sigma=spec.sigma,
        target=target, rows=rows
    )


def _learning_methods(learners: Optional[Sequence]) -> List[LearnerMethod]:
    if learners is None:
        return list(LEARNING_METHODS)
    resolved = [LearnerMethod(method) for method in learners]
    if not resolved:
        raise ConfigError("no learners requested")
    return resolved


def learn_with(
    method: LearnerMethod,
    ds: LoggedDataset,
    cfg: BalanceConfig,
    lcfg: LearnerConfig,
    settings: NuisanceSettings,
    nuisance_seed: int = 0
):
    """Fit the nuisances a learner needs and run it; returns a LearningResult."""
    if method == LearnerMethod.BALANCED:
        return learn_balanced(ds, cfg, lcfg)
    if method == LearnerMethod.DIRECT:
        return learn_direct(ds, fit_kernel_ridge_per_arm(ds, settings.kernel, settings.ridge))

    mu_hat = None
    if method in (LearnerMethod.BALANCED_DR, LearnerMethod.DR_LOGIT):
        mu_hat = crossfit(
            ds, outcome_fitter("kernel-ridge", settings.kernel, settings.ridge),
            folds=settings.folds, seed=nuisance_seed
        ).predictions
    if method == LearnerMethod.BALANCED_DR:
        return learn_balanced_dr(ds, cfg, lcfg, mu_hat)

    phi_hat = fit_gaussian_discriminant(ds.X, ds.T, ds.m).predict(ds.X)
    if method == LearnerMethod.IPW_LOGIT:
        return learn_ipw_logit(ds, phi_hat, lcfg)
    return learn_dr_logit(ds, phi_hat, mu_hat, lcfg)


def _learning_replication(
    spec: Example1Spec,
    methods: Sequence[LearnerMethod],
    cfg: BalanceConfig,
    lcfg: LearnerConfig,
    settings: NuisanceSettings,
    pape_samples: int,
    pape_seed: int,
    child_seed: int
) -> Dict[str, Optional[float]]:
    ds, env = gen_example1(Example1Spec(m=spec.m, n=spec.n, sigma=spec.sigma, seed=child_seed))
    regrets: Dict[str, Optional[float]] = {}
    for method in methods:
        try:
            result = learn_with(method, ds, cfg, lcfg, settings, nuisance_seed=child_seed)
            regrets[method.value] = regret(result.policy, env, pape_samples, pape_seed).value
        except BalanceBenchError as exc:
            logger.warning(f"{method.value} learner failed: {exc}",
                           extra={'event': 'replication_failure', 'method': method.value})
            regrets[method.value] = None
    return regrets


def run_learning_benchmark(
    spec: Example1Spec = Example1Spec(sigma=0.0),
    learners: Optional[Sequence] = None,
    draws: int = 20,
    seed: Optional[int] = None,
    cfg: BalanceConfig = BalanceConfig(lam=0.0),
    lcfg: LearnerConfig = LearnerConfig(),
    settings: NuisanceSettings = NuisanceSettings(),
    pape_samples: int = DEFAULT_PAPE_SAMPLES,
    n_jobs: int = 1
) -> ReplicationReport:
    """
    Learn on fresh Example-1 draws and report population regret per learner.

    The regret oracle uses one covariate stream shared by all learners and
    draws, so differences between rows are not Monte Carlo noise.
    """
    if draws < 1:
        raise ConfigError(f"draws must be >= 1, got {draws}")
    methods = _learning_methods(learners)
    seed = spec.seed if seed is None else seed
    seeds = spawn_seeds(seed, draws + 1)
    pape_seed, draw_seeds = seeds[0], seeds[1:]

    logger.info(
        f"Learning benchmark: n={spec.n}, draws={draws}, learners={[m.value for m in methods]}",
        extra={'event': 'benchmark_start', 'mode': 'learning', 'draws': draws, 'seed': seed}
    )

    def task(index: int, child_seed: int):
        return _learning_replication(spec, methods, cfg, lcfg, settings, pape_samples, pape_seed, child_seed)

    results = _run_pool(task, draw_seeds, n_jobs, "learning")
    rows = []
    for method in methods:
        values = [r[method.value] for r in results if r[method.value] is not None]
        failures = draws - len(values)
        if values:
            rows.append(MethodSummary(
                method=method.value,
                mean_regret=float(np.mean(values)),
                regret_sd=float(np.std(values)),
                failures=failures
            ))
        else:
            rows.append(MethodSummary(method=method.value, failures=failures))
    return ReplicationReport(
        mode="learning", replications=draws, seed=seed, n=spec.n, sigma=spec.sigma, rows=rows
    )


def fit_log_log_slope(n_grid: Sequence[int], rmse: Sequence[float], level: float = 0.95) -> SlopeFit:
    """Least-squares fit of log(rmse) on log(n) with a t-based interval for the slope."""
    result = stats.linregress(np.log(np.asarray(n_grid, dtype=float)), np.log(np.asarray(rmse, dtype=float)))
    dof = len(n_grid) - 2
    half_width = float(stats.t.ppf(0.5 + level / 2, dof)) * float(result.stderr)
    return SlopeFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        std_error=float(result.stderr),
        ci_low=float(result.slope) - half_width,
        ci_high=float(result.slope) + half_width
    )


def _rate_replication(
    env: TrueEnvironment,
    n: int,
    cfg: BalanceConfig,
    options: SolverOptions,
    methods: Sequence[str],
    child_seed: int
) -> Dict[str, Optional[float]]:
    ds = sample_logged(env, n, np.random.default_rng(child_seed))
    P = assignment_of(optimal_policy(env), ds.X, env.m)
    target = sape(P, env.mu_matrix(ds.X))
    errors: Dict[str, Optional[float]] = {}
    for method in methods:
        try:
            if method == "balanced":
                grams = build_grams(cfg, ds.X, ds.m)
                value = tau_weighted(solve_weights(P, ds.T, cfg, grams, options).W, ds.Y)
            else:
                W = propensity_weights(EstimatorMethod.IPW, P, ds.T, env.propensities(ds.X))
                value = tau_weighted(W, ds.Y)
            errors[method] = value - target
        except BalanceBenchError as exc:
            logger.warning(f"{method} failed at n={n}: {exc}",
                           extra={'event': 'replication_failure', 'method': method, 'n': n})
            errors[method] = None
    return errors


def run_rate_experiment(
    n_grid: Sequence[int] = (50, 100, 200, 400),
    reps: int = 100,
    seed: int = 0,
    env: Optional[TrueEnvironment] = None,
    cfg: Optional[BalanceConfig] = None,
    options: SolverOptions = SolverOptions(),
    methods: Sequence[str] = RATE_METHODS,
    n_jobs: int = 1
) -> RateReport:
    """
    RMSE of the balanced and true-propensity IPW estimators against n.

    The default truth is a finite kernel expansion and the balanced objective
    uses the same kernel (identity scale), so the outcome model is well
    specified. Each sample size draws fresh covariates per replication.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if len(n_grid) < 4:
        raise ConfigError(f"rate experiment needs at least 4 sample sizes, got {len(n_grid)}")
    if n_grid[0] < 2:
        raise ConfigError("rate experiment sample sizes must be >= 2")
    if reps < 2:
        raise ConfigError(f"reps must be >= 2, got {reps}")
    unknown = [m for m in methods if m not in RATE_METHODS]
    if unknown:
        raise ConfigError(f"rate experiment methods are {list(RATE_METHODS)}, got {unknown}")

    if env is None:
        env = kernel_expansion_environment(seed=seed)
    if cfg is None:
        d = int(env.params.get('d', 2))
        bandwidth = float(env.params.get('bandwidth', 1.0))
        lam = float(env.noise_sd) ** 2
        cfg = BalanceConfig(lam=lam, kernel=KernelSpec(bandwidth=bandwidth, scale_matrix=np.eye(d)))

    rmse: Dict[str, List[float]] = {method: [] for method in methods}
    grid_seeds = spawn_seeds(seed, len(n_grid))
    for n, grid_seed in zip(n_grid, grid_seeds):
        def task(index: int, child_seed: int, n=n):
            return _rate_replication(env, n, cfg, options, methods, child_seed)

        results = _run_pool(task, spawn_seeds(grid_seed, reps), n_jobs, f"rate n={n}")
        for method in methods:
            errors = [r[method] for r in results if r[method] is not None]
            if not errors:
                raise NumericalError(f"{method} failed in every replication at n={n}")
            rmse[method].append(summarize_errors(errors)[0])

    fits = {method: fit_log_log_slope(n_grid, values) for method, values in rmse.items()}
    for method, fit in fits.items():
        logger.info(
            f"{method}: slope={fit.slope:.3f} [{fit.ci_low:.3f}, {fit.ci_high:.3f}]",
            extra={'event': 'rate_fit', 'method': method, 'slope': fit.slope}
        )
    return RateReport(seed=seed, replications=reps, n_grid=n_grid, rmse=rmse, fits=fits)
