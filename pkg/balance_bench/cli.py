"""
Command-line interface for balance-bench.

Every subcommand is a thin wrapper around the library: reports are written to
stdout as JSON (and under --output when given), logs go to stderr.
"""

import logging
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

import click
import numpy as np
from rich.console import Console

from .config import RunConfig, load_run_config, with_overrides
from .data import LoggedDataset
from .errors import BalanceBenchError, DataError, NumericalError
from .estimators import estimate
from .exporters import ResultExporter, render_replication_table, trace_table
from .benchmark import (
    NuisanceSettings,
    run_evaluation_benchmark,
    run_learning_benchmark,
    run_rate_experiment,
)
from .learner import learn_balanced, learn_balanced_dr, learn_direct, learn_dr_logit, learn_ipw_logit
from .models import KnownPropensity, crossfit, fit_propensity, outcome_fitter, tune_hyperparameters
from .policies import DeterministicPolicy, FixedAssignmentPolicy, LogitPolicy, UniformPolicy
from .schema import EstimatorMethod, LearnerMethod
from .simulation import (
    Example1Spec,
    environment_config,
    environment_from_config,
    gen_example1,
    kernel_expansion_environment,
    optimal_policy,
    policy_region_grid,
    regret,
    sample_logged,
    DEFAULT_PAPE_SAMPLES,
)
from .utils.io import dataset_csv_text, dumps_json, load_dataset_csv, load_json, load_matrix_csv, save_csv, save_json
from .utils.logging import setup_logging
from .utils.timers import performance_tracker

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


@dataclass
class RunContext:
    config: RunConfig
    seed: int
    output: Optional[Path]
    maximize: bool

    def exporter(self) -> Optional[ResultExporter]:
        return ResultExporter(self.output) if self.output is not None else None


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_USAGE


class BalanceBenchGroup(click.Group):
    """Click group that maps library errors to exit codes 1, 2 and 3."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = result if isinstance(result, int) else 0
        except click.ClickException as exc:
            exc.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        except BalanceBenchError as exc:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"error: {exc}", err=True)
            code = _exit_code(exc)
        if standalone_mode:
            sys.exit(code)
        return code


def _draw_seed() -> int:
    seed = int(np.random.SeedSequence().entropy % (2 ** 32))
    click.echo(f"seed: {seed}", err=True)
    return seed


def _emit(report, ctx: RunContext, name: str) -> None:
    click.echo(dumps_json(report), nl=False)
    exporter = ctx.exporter()
    if exporter is not None:
        exporter.export_report(report, name)


def _log_timings() -> None:
    stats = performance_tracker.get_all_stats()
    if stats:
        logger.debug("Timing summary", extra={'event': 'timings', 'timings': stats})


@click.group(cls=BalanceBenchGroup)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='JSON run configuration')
@click.option('--seed', type=click.IntRange(min=0, max=2 ** 32 - 1), default=None,
              help='Master seed (default: config seed, else drawn from entropy)')
@click.option('--output', type=click.Path(file_okay=False), default=None,
              help='Directory for result artifacts')
@click.option('--maximize', is_flag=True, help='Outcomes are rewards; negate them on load')
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']), default='WARNING',
              show_default=True)
@click.option('--log-file', type=click.Path(dir_okay=False), default=None, help='JSON-lines log file')
@click.option('--json-logs/--rich-logs', default=True, help='Console log format')
@click.pass_context
def cli(ctx, config_path, seed, output, maximize, log_level, log_file, json_logs):
    """Balanced off-policy evaluation and learning."""
    setup_logging(
        level=log_level,
        log_file=Path(log_file) if log_file else None,
        json_format=json_logs,
        console_output=True
    )
    config = load_run_config(config_path)
    if seed is None:
        seed = config.seed if config.seed is not None else _draw_seed()
    output = output or config.output
    ctx.obj = RunContext(config=config, seed=seed, output=Path(output) if output else None, maximize=maximize)
    ctx.call_on_close(_log_timings)


def parse_policy(spec: str, ds: LoggedDataset):
    """
    Policy from 'uniform', 'deterministic:<arm>', a logit JSON file or an assignment CSV.
    """
    if spec == "uniform":
        return UniformPolicy(n_arms=ds.m)
    if spec.startswith("deterministic:"):
        arm = spec.split(":", 1)[1]
        if not arm.isdigit():
            raise click.BadParameter(f"arm must be an integer, got {arm!r}", param_hint="--policy")
        return DeterministicPolicy(n_arms=ds.m, arm=int(arm) - 1)
    path = Path(spec)
    if path.suffix.lower() == ".json":
        data = load_json(path)
        if not isinstance(data, dict) or data.get('beta') is None:
            raise DataError(f"{path}: policy JSON needs a 'beta' matrix")
        policy = LogitPolicy(beta=np.asarray(data['beta'], dtype=float))
        if policy.beta.shape != (ds.m, ds.d + 1):
            raise DataError(f"{path}: beta has shape {policy.beta.shape}, expected ({ds.m}, {ds.d + 1})")
        return policy
    if path.suffix.lower() == ".csv":
        return FixedAssignmentPolicy(P=load_matrix_csv(path, shape=(ds.n, ds.m)))
    raise click.BadParameter(
        "expected 'uniform', 'deterministic:<arm>', a .json logit policy or a .csv assignment",
        param_hint="--policy"
    )


def _propensities(ds: LoggedDataset, config: RunConfig, spec: Optional[str]) -> np.ndarray:
    kind = spec or config.propensity.kind
    if kind.startswith("known"):
        _, _, path = kind.partition(":")
        if not path:
            raise click.BadParameter("known propensities need a file: known:<path>", param_hint="--propensity")
        return KnownPropensity(load_matrix_csv(path, shape=(ds.n, ds.m)), ds.m).predict(ds.X)
    if kind not in ("logit", "gaussian"):
        raise click.BadParameter(f"unknown propensity model {kind!r}", param_hint="--propensity")
    return fit_propensity(kind, ds.X, ds.T, ds.m).predict(ds.X)


def _outcome_predictions(ds: LoggedDataset, config: RunConfig, seed: int) -> Tuple[np.ndarray, List[str]]:
    """Out-of-fold predictions when cross-fitting is enabled, plus any fallback notes."""
    if config.outcome.model == "none":
        raise click.UsageError("this method needs an outcome model but outcome.model is 'none'")
    fitter = outcome_fitter(config.outcome.model, config.kernel_spec(), config.outcome.ridge)
    if config.crossfit.enabled:
        result = crossfit(ds, fitter, folds=config.crossfit.folds, seed=seed)
        return result.predictions, result.fallbacks
    return fitter(ds).predict(ds.X), []


def _outcome_model(ds: LoggedDataset, config: RunConfig):
    if config.outcome.model == "none":
        raise click.UsageError("the direct method needs an outcome model but outcome.model is 'none'")
    return outcome_fitter(config.outcome.model, config.kernel_spec(), config.outcome.ridge)(ds)


@cli.command()
@click.option('--data', 'data_path', type=click.Path(dir_okay=False), required=True, help='Dataset CSV')
@click.option('--policy', 'policy_spec', required=True,
              help="'uniform', 'deterministic:<arm>', logit JSON or assignment CSV")
@click.option('--method', type=click.Choice([m.value for m in EstimatorMethod]), default='balanced',
              show_default=True)
@click.option('--propensity', default=None, help="logit | gaussian | known:<path> (default: config)")
@click.option('--clip', type=float, default=None, help='Clip level for cipw/ncipw (default: config)')
@click.option('--lambda', 'lam', type=click.FloatRange(min=0), default=None, help='Override balance.lambda')
@click.option('--bandwidth', type=click.FloatRange(min=0, min_open=True), default=None,
              help='Override kernel.bandwidth')
@click.option('--outcome-model', type=click.Choice(['kernel-ridge', 'arm-mean', 'none']), default=None,
              help='Override outcome.model')
@click.option('--crossfit/--no-crossfit', 'crossfit_enabled', default=None,
              help='Out-of-fold outcome predictions (default: config)')
@click.option('--weights/--no-weights', default=True, help='Include the weight vector in the report')
@click.pass_obj
def evaluate(ctx: RunContext, data_path, policy_spec, method, propensity, clip, lam, bandwidth, outcome_model,
             crossfit_enabled, weights):
    """Estimate the cost of a policy from logged data."""
    method = EstimatorMethod(method)
    config = with_overrides(ctx.config, {
        'balance.lambda': lam, 'kernel.bandwidth': bandwidth, 'propensity.clip': clip,
        'outcome.model': outcome_model, 'crossfit.enabled': crossfit_enabled
    })
    if propensity is not None and not method.uses_propensity:
        raise click.UsageError(f"--propensity does not apply to method {method.value}")
    if clip is not None and method not in (EstimatorMethod.CIPW, EstimatorMethod.NCIPW):
        raise click.UsageError(f"--clip does not apply to method {method.value}")

    ds = load_dataset_csv(data_path, maximize=ctx.maximize)
    policy = parse_policy(policy_spec, ds)
    phi_hat = _propensities(ds, config, propensity) if method.uses_propensity else None
    mu_hat, fallbacks = _outcome_predictions(ds, config, ctx.seed) if method.uses_outcome_model else (None, [])

    report = estimate(
        method, ds, policy, phi_hat=phi_hat, mu_hat=mu_hat, clip=config.propensity.clip,
        cfg=config.balance_config(), options=config.solver_options()
    )
    if fallbacks:
        report = report.model_copy(update={'crossfit_fallbacks': fallbacks})
    if not weights:
        report = report.model_copy(update={'weights': None})
    _emit(report, ctx, "evaluation")


@cli.command()
@click.option('--data', 'data_path', type=click.Path(dir_okay=False), required=True, help='Dataset CSV')
@click.option('--method', type=click.Choice([m.value for m in LearnerMethod]), default='balanced',
              show_default=True)
@click.option('--propensity', default=None, help="logit | gaussian | known:<path> (default: config)")
@click.option('--lambda-reg', type=click.FloatRange(min=0), default=None, help='Override learner.lambda_reg')
@click.option('--restarts', type=click.IntRange(min=1), default=None, help='Override learner.restarts')
@click.option('--max-iters', type=click.IntRange(min=1), default=None, help='Override learner.max_iters')
@click.option('--trace', 'trace_path', type=click.Path(dir_okay=False), default=None,
              help='Write the iteration trace CSV here')
@click.option('--regions', 'regions_path', type=click.Path(dir_okay=False), default=None,
              help='Write the argmax region grid CSV here (2 covariates only)')
@click.option('--eval-against', 'env_path', type=click.Path(dir_okay=False), default=None,
              help='Environment JSON from simulate; adds population regret')
@click.option('--pape-samples', type=click.IntRange(min=1), default=DEFAULT_PAPE_SAMPLES, show_default=True)
@click.pass_obj
def learn(ctx: RunContext, data_path, method, propensity, lambda_reg, restarts, max_iters,
          trace_path, regions_path, env_path, pape_samples):
    """Learn a softmax-linear policy from logged data."""
    method = LearnerMethod(method)
    config = with_overrides(ctx.config, {
        'learner.lambda_reg': lambda_reg, 'learner.restarts': restarts, 'learner.max_iters': max_iters
    })
    if propensity is not None and method not in (LearnerMethod.IPW_LOGIT, LearnerMethod.DR_LOGIT):
        raise click.UsageError(f"--propensity does not apply to learner {method.value}")

    ds = load_dataset_csv(data_path, maximize=ctx.maximize)
    lcfg = config.learner_config(ctx.seed)
    cfg = config.balance_config()

    if method == LearnerMethod.BALANCED:
        result = learn_balanced(ds, cfg, lcfg)
    elif method == LearnerMethod.BALANCED_DR:
        result = learn_balanced_dr(ds, cfg, lcfg, _outcome_predictions(ds, config, ctx.seed)[0])
    elif method == LearnerMethod.DIRECT:
        result = learn_direct(ds, _outcome_model(ds, config))
    else:
        phi_hat = _propensities(ds, config, propensity)
        if method == LearnerMethod.IPW_LOGIT:
            result = learn_ipw_logit(ds, phi_hat, lcfg)
        else:
            result = learn_dr_logit(ds, phi_hat, _outcome_predictions(ds, config, ctx.seed)[0], lcfg)

    report = result.to_report()
    if env_path is not None:
        env = environment_from_config(load_json(env_path))
        if env.m != ds.m:
            raise DataError(f"environment has {env.m} arms, data has {ds.m}")
        report = report.model_copy(update={'regret': regret(result.policy, env, pape_samples, ctx.seed)})

    regions = None
    if regions_path is not None or ctx.output is not None:
        if ds.d == 2:
            regions = policy_region_grid(result.policy, n_arms=ds.m)
        elif regions_path is not None:
            raise click.UsageError("--regions needs exactly 2 covariates")
    if trace_path is not None:
        save_csv(trace_table(result.trace), trace_path)
    if regions_path is not None:
        save_csv(regions, regions_path)

    click.echo(dumps_json(report), nl=False)
    exporter = ctx.exporter()
    if exporter is not None:
        exporter.export_learned_policy(report, trace=result.trace, regions=regions)


@cli.command()
@click.option('--example', type=click.Choice(['1', 'kernel']), default='1', show_default=True,
              help="'1': five-arm Gaussian mixture; 'kernel': finite kernel expansion")
@click.option('--n', 'n', type=click.IntRange(min=1), default=100, show_default=True)
@click.option('--sigma', type=click.FloatRange(min=0), default=1.0, show_default=True)
@click.option('--m', 'm', type=click.IntRange(min=2), default=None, help='Arm count (default 5, or 3 for kernel)')
@click.option('--env-out', type=click.Path(dir_okay=False), default=None, help='Write the environment JSON here')
@click.option('--regions', 'regions_path', type=click.Path(dir_okay=False), default=None,
              help='Write the optimal policy region grid CSV here')
@click.pass_obj
def simulate(ctx: RunContext, example, n, sigma, m, env_out, regions_path):
    """Generate a synthetic logged dataset."""
    if example == '1':
        ds, env = gen_example1(Example1Spec(m=m or 5, n=n, sigma=sigma, seed=ctx.seed))
    else:
        env = kernel_expansion_environment(m=m or 3, sigma=sigma, seed=ctx.seed)
        ds = sample_logged(env, n, np.random.default_rng(ctx.seed))

    if env_out is not None:
        save_json(environment_config(env), env_out)
    if regions_path is not None:
        save_csv(policy_region_grid(optimal_policy(env), n_arms=env.m), regions_path)

    exporter = ctx.exporter()
    if exporter is None:
        click.echo(dataset_csv_text(ds), nl=False)
        return
    path = exporter.export_dataset(ds)
    exporter.export_report(environment_config(env), "environment")
    click.echo(str(path))


def _parse_list(text: Optional[str], cast=str) -> Optional[List]:
    if text is None:
        return None
    try:
        return [cast(item.strip()) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


@cli.command()
@click.option('--mode', type=click.Choice(['evaluation', 'learning', 'rate']), default='evaluation',
              show_default=True)
@click.option('--reps', type=click.IntRange(min=1), default=200, show_default=True,
              help='Replications (learning: fresh draws)')
@click.option('--n', 'n', type=click.IntRange(min=1), default=100, show_default=True)
@click.option('--sigma', type=click.FloatRange(min=0), default=None,
              help='Noise sd (default 1 for evaluation and rate, 0 for learning)')
@click.option('--methods', default=None, help='Comma-separated methods or learners')
@click.option('--grid', 'grid', default="50,100,200,400", show_default=True, help='Rate experiment sample sizes')
@click.option('--pape-samples', type=click.IntRange(min=1), default=DEFAULT_PAPE_SAMPLES, show_default=True)
@click.option('--lambda', 'lam', type=click.FloatRange(min=0), default=None,
              help='Variance penalty (default: balance.lambda for evaluation, 0 for learning)')
@click.option('--n-jobs', type=int, default=1, show_default=True)
@click.pass_obj
def benchmark(ctx: RunContext, mode, reps, n, sigma, methods, grid, lam, pape_samples, n_jobs):
    """Run a replication benchmark on synthetic data."""
    config = ctx.config
    output = ctx.output or Path("outputs") / datetime.now().strftime("%Y%m%d_%H%M%S")
    exporter = ResultExporter(output)
    settings = NuisanceSettings(
        kernel=config.kernel_spec(), ridge=config.outcome.ridge,
        folds=config.crossfit.folds, clip=config.propensity.clip
    )

    if mode == 'rate':
        env = kernel_expansion_environment(sigma=1.0 if sigma is None else sigma, seed=ctx.seed)
        report = run_rate_experiment(
            n_grid=_parse_list(grid, int), reps=reps, seed=ctx.seed, env=env,
            options=config.solver_options(), methods=_parse_list(methods) or ("balanced", "ipw"),
            n_jobs=n_jobs
        )
        exporter.export_rate(report)
    elif mode == 'evaluation':
        spec = Example1Spec(n=n, sigma=1.0 if sigma is None else sigma, seed=ctx.seed)
        report = run_evaluation_benchmark(
            spec, _parse_list(methods), reps=reps, seed=ctx.seed, cfg=config.balance_config(lam=lam),
            settings=settings, options=config.solver_options(), n_jobs=n_jobs
        )
        exporter.export_replication(report)
    else:
        spec = Example1Spec(n=n, sigma=0.0 if sigma is None else sigma, seed=ctx.seed)
        report = run_learning_benchmark(
            spec, _parse_list(methods), draws=reps, seed=ctx.seed,
            cfg=config.balance_config(lam=0.0 if lam is None else lam),
            lcfg=config.learner_config(ctx.seed), settings=settings,
            pape_samples=pape_samples, n_jobs=n_jobs
        )
        exporter.export_replication(report)

    if mode != 'rate':
        render_replication_table(report, Console(stderr=True))
    click.echo(dumps_json(report), nl=False)


@cli.command()
@click.option('--data', 'data_path', type=click.Path(dir_okay=False), required=True, help='Dataset CSV')
@click.pass_obj
def tune(ctx: RunContext, data_path):
    """Select kernel bandwidth, gamma and noise by Gaussian-process marginal likelihood."""
    ds = load_dataset_csv(data_path, maximize=ctx.maximize)
    result = tune_hyperparameters(ds, ctx.config.tuning_grid(), ctx.config.kernel_spec())
    _emit(result, ctx, "tuning")


def main() -> None:
    """Console-script entry point."""
    cli(prog_name='balance-bench')


if __name__ == '__main__':
    main()
