"""
Per-arm outcome regression.

Two model kinds: kernel ridge regression on each arm's subsample and the
per-arm sample mean. Both predict an n x m matrix of mu_hat_t(X_i).
"""

import logging
from enum import Enum
from typing import List, Optional, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq

from ..data import LoggedDataset
from ..errors import ConfigError, MissingArmError
from ..kernels import KernelSpec, cross_gram, gram_matrix, resolve_spec

logger = logging.getLogger(__name__)


class OutcomeKind(str, Enum):
    KERNEL_RIDGE = "kernel-ridge"
    ARM_MEAN = "arm-mean"
    NONE = "none"


def _missing_arms(ds: LoggedDataset) -> List[int]:
    counts = ds.arm_counts()
    return [t for t in range(ds.m) if counts[t] == 0]


class KernelRidgeOutcome:
    """mu_hat_t(x) = sum_j alpha_tj k(x, X_j^t) over the t-treated rows."""

    def __init__(
        self,
        spec: KernelSpec,
        ridge: float,
        train_X: List[Optional[np.ndarray]],
        coefficients: List[Optional[np.ndarray]],
        missing_arm_value: Optional[float] = None
    ):
        self.kind = OutcomeKind.KERNEL_RIDGE
        self.spec = spec
        self.ridge = ridge
        self.train_X = train_X
        self.coefficients = coefficients
        self.missing_arm_value = missing_arm_value
        self.n_arms = len(coefficients)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu_hat = np.empty((X.shape[0], self.n_arms))
        for t in range(self.n_arms):
            if self.coefficients[t] is None:
                mu_hat[:, t] = self.missing_arm_value
            else:
                mu_hat[:, t] = cross_gram(self.spec, X, self.train_X[t]) @ self.coefficients[t]
        return mu_hat

    def rkhs_norms_sq(self) -> np.ndarray:
        """alpha_t^T K_t alpha_t per arm (0 for unfitted arms)."""
        norms = np.zeros(self.n_arms)
        for t in range(self.n_arms):
            if self.coefficients[t] is not None:
                K = gram_matrix(self.spec, self.train_X[t]).K
                norms[t] = float(self.coefficients[t] @ K @ self.coefficients[t])
        return norms


class ArmMeanOutcome:
    """mu_hat_t(x) = mean of Y over the t-treated rows."""

    def __init__(self, means: np.ndarray):
        self.kind = OutcomeKind.ARM_MEAN
        self.means = np.asarray(means, dtype=float)
        self.n_arms = len(self.means)

    def predict(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        return np.tile(self.means, (n, 1))


def _ridge_solve(K: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    A = K + ridge * np.eye(K.shape[0])
    try:
        return cho_solve(cho_factor(A, lower=True), y)
    except LinAlgError:
        logger.debug("Cholesky failed in kernel ridge; using least squares",
                     extra={'event': 'ridge_lstsq', 'size': K.shape[0]})
        return lstsq(A, y)[0]


def fit_kernel_ridge_per_arm(
    ds: LoggedDataset,
    kernel: Optional[KernelSpec] = None,
    ridge: float = 0.1,
    missing_arm_value: Optional[float] = None
) -> KernelRidgeOutcome:
    """
    Fit (K_t + ridge * I) alpha_t = Y^t separately on each arm.

    The kernel scale is resolved once on all of ds.X so every arm shares it.

    Args:
        ds: Training data
        kernel: Kernel spec (default: s = 1, sample scale)
        ridge: Ridge parameter, >= 0
        missing_arm_value: Constant prediction for arms with no rows; when
            None an unobserved arm raises

    Raises:
        MissingArmError: an arm is unobserved and no fallback was given
    """
    if ridge < 0:
        raise ConfigError(f"outcome.ridge must be >= 0, got {ridge}")
    missing = _missing_arms(ds)
    if missing and missing_arm_value is None:
        raise MissingArmError(missing)

    spec = resolve_spec(kernel or KernelSpec(), ds.X)
    train_X: List[Optional[np.ndarray]] = []
    coefficients: List[Optional[np.ndarray]] = []
    for t in range(ds.m):
        rows = ds.T == t
        if not np.any(rows):
            train_X.append(None)
            coefficients.append(None)
            continue
        X_t = ds.X[rows]
        K = gram_matrix(spec, X_t).K
        train_X.append(X_t)
        coefficients.append(_ridge_solve(K, ds.Y[rows], ridge))

    return KernelRidgeOutcome(spec, ridge, train_X, coefficients, missing_arm_value)


def fit_arm_means(ds: LoggedDataset, missing_arm_value: Optional[float] = None) -> ArmMeanOutcome:
    """Per-arm sample means."""
    missing = _missing_arms(ds)
    if missing and missing_arm_value is None:
        raise MissingArmError(missing)
    means = np.array([
        ds.Y[ds.T == t].mean() if t not in missing else missing_arm_value
        for t in range(ds.m)
    ], dtype=float)
    return ArmMeanOutcome(means)


OutcomeModel = Union[KernelRidgeOutcome, ArmMeanOutcome]


def outcome_fitter(kind: Union[OutcomeKind, str], kernel: Optional[KernelSpec] = None, ridge: float = 0.1):
    """Return fitter(ds, missing_arm_value=None) for the given model kind."""
    kind = OutcomeKind(kind)
    if kind == OutcomeKind.KERNEL_RIDGE:
        def fit(ds: LoggedDataset, missing_arm_value: Optional[float] = None) -> OutcomeModel:
            return fit_kernel_ridge_per_arm(ds, kernel, ridge, missing_arm_value)
        return fit
    if kind == OutcomeKind.ARM_MEAN:
        return fit_arm_means
    raise ConfigError("outcome model 'none' cannot be fitted")
