"""
Core data model for logged bandit feedback and policy assignments.

Treatments are stored 0-based; files and user-facing messages use 1-based
arms. Arrays are made read-only on construction.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Union

import numpy as np

from .errors import DataError
from .schema import ValidationResult, Violation

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LoggedDataset:
    """Observational sample: covariates X (n x d), treatments T, costs Y."""
    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    m: int

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, 'X', _frozen(X))
        object.__setattr__(self, 'T', _frozen(np.asarray(self.T).astype(int).ravel()))
        object.__setattr__(self, 'Y', _frozen(np.asarray(self.Y, dtype=float).ravel()))
        object.__setattr__(self, 'm', int(self.m))

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1])

    def treatment_indicators(self) -> np.ndarray:
        """n x m 0/1 matrix with a one at (i, T_i)."""
        onehot = np.zeros((self.n, self.m))
        onehot[np.arange(self.n), self.T] = 1.0
        return onehot

    def subset(self, rows: np.ndarray) -> 'LoggedDataset':
        return LoggedDataset(X=self.X[rows], T=self.T[rows], Y=self.Y[rows], m=self.m)

    def with_outcomes(self, Y: np.ndarray) -> 'LoggedDataset':
        return LoggedDataset(X=self.X, T=self.T, Y=Y, m=self.m)

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.T, minlength=self.m)[:self.m]


@dataclass(frozen=True)
class PolicyAssignment:
    """Row-stochastic n x m matrix with P[i, t] = pi_t(X_i)."""
    P: np.ndarray

    def __post_init__(self) -> None:
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2:
            raise DataError(f"assignment must be a matrix, got shape {P.shape}")
        if not np.all(np.isfinite(P)):
            raise DataError("assignment has non-finite entries")
        if np.any(P < 0) or np.any(P > 1 + ROW_SUM_TOL):
            raise DataError("assignment entries must lie in [0, 1]")
        row_error = np.abs(P.sum(axis=1) - 1.0)
        if np.any(row_error > ROW_SUM_TOL):
            row = int(np.argmax(row_error))
            raise DataError(f"assignment row {row} sums to {P[row].sum():.12g}, not 1")
        object.__setattr__(self, 'P', _frozen(P))

    @property
    def n(self) -> int:
        return int(self.P.shape[0])

    @property
    def m(self) -> int:
        return int(self.P.shape[1])

    def column(self, t: int) -> np.ndarray:
        return self.P[:, t]

    def on_observed(self, T: np.ndarray) -> np.ndarray:
        """pi_{T_i}(X_i) for each row."""
        return self.P[np.arange(self.n), np.asarray(T, dtype=int)]


AssignmentLike = Union[PolicyAssignment, np.ndarray]


def as_matrix(P: AssignmentLike) -> np.ndarray:
    """Unwrap an assignment; raw matrices pass through for pure algebra."""
    if isinstance(P, PolicyAssignment):
        return P.P
    return np.asarray(P, dtype=float)


class Policy(Protocol):
    """Anything mapping covariates to probability vectors over arms."""
    n_arms: int

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class TrueEnvironment:
    """Simulation truth: mean outcomes, propensities, noise and a covariate sampler."""
    mu: Callable[[np.ndarray], np.ndarray]
    phi: Callable[[np.ndarray], np.ndarray]
    noise_sd: float
    m: int
    sample_covariates: Callable[[int, np.random.Generator], np.ndarray]
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.noise_sd < 0:
            raise DataError(f"noise_sd must be >= 0, got {self.noise_sd}")

    def mu_matrix(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.mu(np.atleast_2d(X)), dtype=float)

    def propensities(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.phi(np.atleast_2d(X)), dtype=float)

    def draw_treatments(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sample T | X from the propensity function (0-based)."""
        probs = self.propensities(X)
        cumulative = np.cumsum(probs, axis=1)
        u = rng.random(len(X))[:, None]
        return np.minimum((u > cumulative).sum(axis=1), self.m - 1)

    def draw_outcomes(self, X: np.ndarray, T: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        means = self.mu_matrix(X)[np.arange(len(X)), T]
        return means + self.noise_sd * rng.standard_normal(len(X))


def validate_dataset(ds: LoggedDataset) -> ValidationResult:
    """
    Check every LoggedDataset invariant.

    Args:
        ds: Dataset to check

    Returns:
        ValidationResult listing each violation with its row index
    """
    violations = []
    n_x, n_t, n_y = ds.X.shape[0], ds.T.shape[0], ds.Y.shape[0]

    if ds.m < 1:
        violations.append(Violation(message=f"treatment count must be positive, got {ds.m}"))
    if n_x < 1:
        violations.append(Violation(message="dataset has no rows"))
    if not (n_x == n_t == n_y):
        violations.append(Violation(
            message=f"length mismatch: X has {n_x} rows, T has {n_t}, Y has {n_y}"
        ))

    for i in range(min(n_x, n_t, n_y)):
        if ds.T[i] < 0 or ds.T[i] >= ds.m:
            violations.append(Violation(row=i, message=f"treatment index out of range at row {i}"))
        if not np.all(np.isfinite(ds.X[i])):
            violations.append(Violation(row=i, message=f"non-finite covariate at row {i}"))
        if not np.isfinite(ds.Y[i]):
            violations.append(Violation(row=i, message=f"non-finite outcome at row {i}"))

    return ValidationResult(violations=violations)


def require_valid(ds: LoggedDataset) -> LoggedDataset:
    """Raise DataError listing all violations, otherwise return ds."""
    result = validate_dataset(ds)
    if not result.ok:
        raise DataError("invalid dataset: " + "; ".join(result.messages()))
    if ds.n == 1:
        logger.warning("dataset has a single row; variance statements are undefined")
    return ds


def assignment_of(
    policy: Policy,
    X: np.ndarray,
    n_arms: Optional[int] = None
) -> PolicyAssignment:
    """
    Materialize P[i, t] = pi_t(X_i).

    Args:
        policy: Object exposing probabilities(X) -> n x m
        X: Covariate matrix
        n_arms: Expected arm count; defaults to policy.n_arms

    Returns:
        PolicyAssignment

    Raises:
        DataError: wrong width or negative entries
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    expected = n_arms if n_arms is not None else getattr(policy, 'n_arms', None)
    probs = np.asarray(policy.probabilities(X), dtype=float)
    if probs.ndim != 2 or probs.shape[0] != X.shape[0]:
        raise DataError(f"policy returned shape {probs.shape} for {X.shape[0]} rows")
    if expected is not None and probs.shape[1] != expected:
        raise DataError(f"policy returned {probs.shape[1]} arms, expected {expected}")
    if np.any(probs < 0):
        row = int(np.argwhere(probs < 0)[0, 0])
        raise DataError(f"policy returned a negative probability at row {row}")
    return PolicyAssignment(P=probs)
