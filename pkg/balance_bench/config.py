"""
Run configuration loaded from a JSON file.

Every section rejects unknown keys; errors name the dotted key. Command-line
flags are applied on top with :func:`with_overrides`.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .balance import BalanceConfig, SolverOptions
from .errors import ConfigError, DataError
from .kernels import KernelSpec
from .learner import LearnerConfig
from .models import TuningGrid
from .utils.io import load_json, load_matrix_csv

logger = logging.getLogger(__name__)


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class KernelSection(Section):
    bandwidth: float = Field(1.0, gt=0, description="RBF bandwidth s")
    scale: str = Field("sample", description="'sample' or a path to a d x d CSV matrix")


class BalanceSection(Section):
    gamma: Union[float, List[float]] = Field(1.0, description="Scalar or per-arm gamma_t")
    lambda_: float = Field(1.0, alias="lambda", ge=0, description="Variance penalty kappa (Lambda = kappa I)")
    tol: float = Field(1e-7, gt=0, description="KKT tolerance")
    max_iters: Optional[int] = Field(None, ge=1, description="Active-set iteration limit; auto when null")


class PropensitySection(Section):
    kind: Literal["logit", "gaussian", "known"] = "logit"
    clip: float = Field(0.05, gt=0, description="Clip level M for clipped IPW")


class OutcomeSection(Section):
    model: Literal["kernel-ridge", "arm-mean", "none"] = "kernel-ridge"
    ridge: float = Field(0.1, ge=0)


class CrossfitSection(Section):
    enabled: bool = True
    folds: int = Field(5, ge=2)


class TuneGridSection(Section):
    bandwidth: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    gamma: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    noise: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0])


class TuneSection(Section):
    grid: TuneGridSection = Field(default_factory=TuneGridSection)


class LearnerSection(Section):
    lambda_reg: float = Field(0.0, ge=0)
    restarts: int = Field(10, ge=1)
    grad_tol: float = Field(1e-6, gt=0)
    max_iters: int = Field(200, ge=1)
    init_scale: float = Field(1.0, ge=0)
    n_jobs: int = 1


class RunConfig(Section):
    """All settings of a CLI run; defaults apply to absent keys."""
    kernel: KernelSection = Field(default_factory=KernelSection)
    balance: BalanceSection = Field(default_factory=BalanceSection)
    propensity: PropensitySection = Field(default_factory=PropensitySection)
    outcome: OutcomeSection = Field(default_factory=OutcomeSection)
    crossfit: CrossfitSection = Field(default_factory=CrossfitSection)
    tune: TuneSection = Field(default_factory=TuneSection)
    learner: LearnerSection = Field(default_factory=LearnerSection)
    seed: Optional[int] = Field(None, ge=0)
    output: Optional[str] = None

    def kernel_spec(self) -> KernelSpec:
        if self.kernel.scale == "sample":
            return KernelSpec(bandwidth=self.kernel.bandwidth)
        try:
            scale = load_matrix_csv(self.kernel.scale)
        except DataError as exc:
            raise ConfigError(f"kernel.scale: {exc}") from exc
        return KernelSpec(bandwidth=self.kernel.bandwidth, scale_matrix=scale)

    def balance_config(self, lam: Optional[float] = None) -> BalanceConfig:
        gamma = self.balance.gamma
        return BalanceConfig(
            gamma=tuple(gamma) if isinstance(gamma, list) else gamma,
            lam=self.balance.lambda_ if lam is None else lam,
            kernel=self.kernel_spec()
        )

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol=self.balance.tol, max_iters=self.balance.max_iters)

    def learner_config(self, seed: int) -> LearnerConfig:
        section = self.learner
        return LearnerConfig(
            lambda_reg=section.lambda_reg,
            restarts=section.restarts,
            grad_tol=section.grad_tol,
            max_iters=section.max_iters,
            seed=seed,
            init_scale=section.init_scale,
            n_jobs=section.n_jobs,
            solver_tol=self.balance.tol
        )

    def tuning_grid(self) -> TuningGrid:
        grid = self.tune.grid
        return TuningGrid(bandwidth=tuple(grid.bandwidth), gamma=tuple(grid.gamma), noise=tuple(grid.noise))


def _dotted(loc) -> str:
    return ".".join(str(part) for part in loc)


def _config_error(exc: ValidationError) -> ConfigError:
    error = exc.errors()[0]
    key = _dotted(error['loc'])
    if error['type'] == 'extra_forbidden':
        return ConfigError(f"unknown config key '{key}'")
    return ConfigError(f"invalid config value for '{key}': {error['msg']}")


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping into a RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise _config_error(exc) from exc


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a JSON config file; no path gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        data = load_json(path)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    config = parse_run_config(data)
    logger.debug(f"Loaded config from {path}", extra={'event': 'config_loaded', 'path': str(path)})
    return config


def with_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Apply dotted-key overrides (``{'learner.restarts': 3}``); None values are skipped.
    """
    data = config.model_dump(by_alias=True)
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value.tolist() if isinstance(value, np.ndarray) else value
    return parse_run_config(data)
