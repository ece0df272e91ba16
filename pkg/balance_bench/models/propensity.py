"""
Propensity models for the logging policy.

Fitted models floor every probability at 1e-12 and renormalize so that
inverse weights stay finite. Known propensities are passed through as given.
"""

import logging
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.linear_model import LogisticRegression

from ..errors import ConfigError, DataError, InsufficientDataError, MissingArmError
from ..kernels import regularize_covariance, sample_covariance

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
LOGIT_PENALTY = 1e-4
LOGIT_TOL = 1e-6


class PropensityKind(str, Enum):
    LOGIT = "logit"
    GAUSSIAN = "gaussian"
    KNOWN = "known"


def floor_probabilities(probs: np.ndarray) -> np.ndarray:
    probs = np.maximum(np.asarray(probs, dtype=float), PROBABILITY_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)


def require_all_arms(T: np.ndarray, m: int, minimum: int = 1) -> np.ndarray:
    """Per-arm counts; raises if any arm is unobserved or too rare."""
    counts = np.bincount(np.asarray(T, dtype=int), minlength=m)[:m]
    missing = [t for t in range(m) if counts[t] == 0]
    if missing:
        raise MissingArmError(missing)
    rare = [t for t in range(m) if counts[t] < minimum]
    if rare:
        arms = ", ".join(str(t + 1) for t in rare)
        raise InsufficientDataError(f"arm(s) {arms} need at least {minimum} observations")
    return counts


class ConstantPropensity:
    """Single-arm case: probability 1 everywhere."""

    def __init__(self, n_arms: int = 1):
        self.kind = PropensityKind.LOGIT
        self.n_arms = n_arms

    def predict(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        return np.full((n, self.n_arms), 1.0 / self.n_arms)


class MultinomialLogitPropensity:
    """Multinomial logistic regression with a weak L2 penalty."""

    def __init__(self, classifier: LogisticRegression, n_arms: int):
        self.kind = PropensityKind.LOGIT
        self.classifier = classifier
        self.n_arms = n_arms

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        probs = np.zeros((X.shape[0], self.n_arms))
        probs[:, self.classifier.classes_] = self.classifier.predict_proba(X)
        return floor_probabilities(probs)


class GaussianDiscriminantPropensity:
    """Bayes-rule posterior of a Gaussian mixture with per-arm or shared covariance."""

    def __init__(self, means: np.ndarray, covariances: np.ndarray, priors: np.ndarray):
        self.kind = PropensityKind.GAUSSIAN
        self.means = means
        self.covariances = covariances
        self.priors = priors
        self.n_arms = len(priors)

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([
            np.log(self.priors[t]) + multivariate_normal.logpdf(
                X, mean=self.means[t], cov=self.covariances[t]
            ).reshape(-1)
            for t in range(self.n_arms)
        ])

    def predict(self, X: np.ndarray) -> np.ndarray:
        log_joint = self.log_joint(X)
        return floor_probabilities(np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True)))


class KnownPropensity:
    """Propensities supplied by the caller, as a fixed matrix or a function of X."""

    def __init__(self, source: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]], n_arms: Optional[int] = None):
        self.kind = PropensityKind.KNOWN
        self.source = source
        if callable(source):
            if n_arms is None:
                raise ConfigError("n_arms is required for callable propensities")
            self.n_arms = n_arms
        else:
            matrix = np.asarray(source, dtype=float)
            if matrix.ndim != 2:
                raise DataError(f"propensity matrix must be 2-d, got shape {matrix.shape}")
            self.n_arms = matrix.shape[1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if callable(self.source):
            probs = np.asarray(self.source(X), dtype=float)
        else:
            probs = np.asarray(self.source, dtype=float)
            if probs.shape[0] != X.shape[0]:
                raise DataError(f"propensity matrix has {probs.shape[0]} rows, data has {X.shape[0]}")
        if np.any(probs < 0) or np.any(~np.isfinite(probs)):
            raise DataError("known propensities must be finite and nonnegative")
        row_error = np.abs(probs.sum(axis=1) - 1.0)
        if np.any(row_error > 1e-6):
            raise DataError(f"known propensity row {int(np.argmax(row_error))} does not sum to 1")
        return probs


def fit_multinomial_logit(X: np.ndarray, T: np.ndarray, m: Optional[int] = None):
    """
    Penalized multinomial logit for P(T = t | X).

    Args:
        X: n x d covariates
        T: 0-based treatments
        m: Arm count; defaults to max(T) + 1

    Returns:
        Fitted propensity model

    Raises:
        MissingArmError: an arm never appears in T
    """
    T = np.asarray(T, dtype=int)
    m = int(m if m is not None else T.max() + 1)
    if m == 1:
        return ConstantPropensity(1)
    require_all_arms(T, m)

    classifier = LogisticRegression(C=1.0 / LOGIT_PENALTY, tol=LOGIT_TOL, max_iter=5000)
    classifier.fit(np.atleast_2d(np.asarray(X, dtype=float)), T)
    logger.debug(
        f"Fitted multinomial logit propensity on {len(T)} rows",
        extra={'event': 'propensity_fit', 'kind': 'logit', 'n': len(T), 'm': m}
    )
    return MultinomialLogitPropensity(classifier, m)


def fit_gaussian_discriminant(
    X: np.ndarray,
    T: np.ndarray,
    m: Optional[int] = None,
    shared_covariance: bool = False
) -> GaussianDiscriminantPropensity:
    """
    Per-arm Gaussian class-conditionals with frequency priors.

    Covariances are ridge-regularized sample covariances; ``shared_covariance``
    pools the within-arm scatter instead.

    Raises:
        MissingArmError: an arm never appears
        InsufficientDataError: an arm has fewer than d + 1 rows
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=int)
    n, d = X.shape
    m = int(m if m is not None else T.max() + 1)
    counts = require_all_arms(T, m, minimum=d + 1)

    means = np.vstack([X[T == t].mean(axis=0) for t in range(m)])
    if shared_covariance:
        centered = X - means[T]
        pooled = regularize_covariance(centered.T @ centered / max(n - m, 1))
        covariances = np.stack([pooled] * m)
    else:
        covariances = np.stack([sample_covariance(X[T == t]) for t in range(m)])
    priors = counts / counts.sum()

    logger.debug(
        "Fitted Gaussian discriminant propensity",
        extra={'event': 'propensity_fit', 'kind': 'gaussian', 'n': n, 'm': m}
    )
    return GaussianDiscriminantPropensity(means, covariances, priors)


def fit_propensity(kind: Union[PropensityKind, str], X: np.ndarray, T: np.ndarray, m: int):
    """Fit a propensity model by kind name; ``known`` is not fitted."""
    kind = PropensityKind(kind)
    if kind == PropensityKind.LOGIT:
        return fit_multinomial_logit(X, T, m)
    if kind == PropensityKind.GAUSSIAN:
        return fit_gaussian_discriminant(X, T, m)
    raise ConfigError("known propensities are loaded, not fitted")
