"""
Gaussian-process marginal likelihood and grid search over kernel hyperparameters.
"""

import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..balance import BalanceConfig
from ..data import LoggedDataset
from ..errors import ConfigError, SingularSystemError
from ..kernels import KernelSpec, gram_matrix, resolve_spec
from ..schema import TuningPoint, TuningResult

logger = logging.getLogger(__name__)

RIDGE_RETRY = 1e-10


@dataclass(frozen=True)
class TuningGrid:
    bandwidth: Sequence[float] = (0.5, 1.0, 2.0)
    gamma: Sequence[float] = (0.5, 1.0, 2.0)
    noise: Sequence[float] = (0.1, 0.5, 1.0)

    def points(self):
        """Grid points ordered by bandwidth, then gamma, then noise."""
        return product(sorted(self.bandwidth), sorted(self.gamma), sorted(self.noise))

    def __len__(self) -> int:
        return len(self.bandwidth) * len(self.gamma) * len(self.noise)


def _cholesky(Sigma: np.ndarray):
    try:
        return cho_factor(Sigma, lower=True)
    except LinAlgError:
        ridge = RIDGE_RETRY * np.trace(Sigma) / Sigma.shape[0]
        try:
            return cho_factor(Sigma + ridge * np.eye(Sigma.shape[0]), lower=True)
        except LinAlgError as exc:
            raise SingularSystemError("GP covariance is not positive definite after ridge retry") from exc


def gp_log_marginal_likelihood(
    X_t: np.ndarray,
    Y_t: np.ndarray,
    kernel: KernelSpec,
    gamma: float,
    noise_var: float
) -> float:
    """
    log N(Y; c 1, gamma^2 K + noise_var I) with the constant mean c profiled out.

    Raises:
        ConfigError: noise_var <= 0
        SingularSystemError: Cholesky fails after a ridge retry
    """
    if not noise_var > 0:
        raise ConfigError(f"noise variance must be > 0, got {noise_var}")
    Y_t = np.asarray(Y_t, dtype=float)
    n = len(Y_t)
    K = gram_matrix(kernel, X_t).K
    factor = _cholesky(gamma ** 2 * K + noise_var * np.eye(n))

    ones = np.ones(n)
    Sigma_inv_ones = cho_solve(factor, ones)
    c_hat = float(Sigma_inv_ones @ Y_t) / float(Sigma_inv_ones @ ones)
    r = Y_t - c_hat
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * r @ cho_solve(factor, r) - 0.5 * log_det - 0.5 * n * np.log(2 * np.pi))


def total_log_likelihood(ds: LoggedDataset, kernel: KernelSpec, gamma: float, noise_var: float) -> float:
    """Sum of per-arm marginal likelihoods; arms with no rows contribute nothing."""
    total = 0.0
    for t in range(ds.m):
        rows = ds.T == t
        if np.any(rows):
            total += gp_log_marginal_likelihood(ds.X[rows], ds.Y[rows], kernel, gamma, noise_var)
    return total


def tune_hyperparameters(
    ds: LoggedDataset,
    grid: TuningGrid,
    kernel: KernelSpec = KernelSpec()
) -> TuningResult:
    """
    Grid search maximizing the summed marginal likelihood.

    Ties go to the smallest bandwidth, then the smallest gamma.
    """
    if len(grid) == 0:
        raise ConfigError("tuning grid is empty")
    base = resolve_spec(kernel, ds.X)
    scored = []
    best = None
    for bandwidth, gamma, noise in grid.points():
        ll = total_log_likelihood(ds, replace(base, bandwidth=bandwidth), gamma, noise)
        point = TuningPoint(bandwidth=bandwidth, gamma=gamma, noise_var=noise, log_likelihood=ll)
        scored.append(point)
        if best is None or ll > best.log_likelihood:
            best = point

    logger.info(
        f"Selected bandwidth={best.bandwidth}, gamma={best.gamma}, noise={best.noise_var}",
        extra={'event': 'tuning_end', 'grid_size': len(scored), 'log_likelihood': best.log_likelihood}
    )
    return TuningResult(best=best, grid=scored)


def apply_tuning(cfg: BalanceConfig, result: TuningResult) -> BalanceConfig:
    """Copy the selected bandwidth and gamma into a config; lambda is left alone."""
    return replace(
        cfg,
        gamma=result.best.gamma,
        kernel=replace(cfg.kernel, bandwidth=result.best.bandwidth),
        arm_kernels=None if cfg.arm_kernels is None else tuple(
            replace(spec, bandwidth=result.best.bandwidth) for spec in cfg.arm_kernels
        )
    )
