"""
Policy classes: softmax-linear, uniform, deterministic, greedy and fixed.

Every policy exposes ``n_arms`` and ``probabilities(X) -> n x m``.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import softmax

from .data import PolicyAssignment
from .errors import DataError

logger = logging.getLogger(__name__)


def design_matrix(X: np.ndarray) -> np.ndarray:
    """Prepend the intercept column: rows (1, X_i)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def softmax_assignment(beta: np.ndarray, X: np.ndarray) -> PolicyAssignment:
    """
    Softmax-linear assignment with pi_t(x) proportional to exp(beta_t0 + beta_t^T x).

    Args:
        beta: m x (d+1) parameter matrix, intercept first
        X: n x d covariates

    Returns:
        PolicyAssignment
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    Z = design_matrix(X)
    if beta.shape[1] != Z.shape[1]:
        raise DataError(f"beta has {beta.shape[1]} columns, expected {Z.shape[1]}")
    # scipy's softmax subtracts the row max before exponentiating
    P = softmax(Z @ beta.T, axis=1)
    return PolicyAssignment(P=P)


@dataclass(frozen=True)
class LogitPolicy:
    """Member of the softmax-linear policy class."""
    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.atleast_2d(np.array(self.beta, dtype=float, copy=True))
        beta.setflags(write=False)
        object.__setattr__(self, 'beta', beta)

    @property
    def n_arms(self) -> int:
        return int(self.beta.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.beta.shape[1] - 1)

    @classmethod
    def zeros(cls, m: int, d: int) -> 'LogitPolicy':
        return cls(beta=np.zeros((m, d + 1)))

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        return softmax_assignment(self.beta, X).P

    def to_dict(self) -> dict:
        return {'kind': 'logit', 'beta': self.beta.tolist()}


@dataclass(frozen=True)
class UniformPolicy:
    n_arms: int

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        return np.full((n, self.n_arms), 1.0 / self.n_arms)


@dataclass(frozen=True)
class DeterministicPolicy:
    """Always choose one arm (0-based)."""
    n_arms: int
    arm: int

    def __post_init__(self) -> None:
        if not 0 <= self.arm < self.n_arms:
            raise DataError(f"arm {self.arm + 1} outside 1..{self.n_arms}")

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        P = np.zeros((n, self.n_arms))
        P[:, self.arm] = 1.0
        return P


@dataclass(frozen=True)
class FixedAssignmentPolicy:
    """A precomputed assignment matrix; only valid for the rows it was built on."""
    P: np.ndarray

    @property
    def n_arms(self) -> int:
        return int(np.asarray(self.P).shape[1])

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        if n != np.asarray(self.P).shape[0]:
            raise DataError(
                f"assignment has {np.asarray(self.P).shape[0]} rows but {n} covariate rows given"
            )
        return np.asarray(self.P, dtype=float)


@dataclass(frozen=True)
class GreedyPolicy:
    """
    Deterministic argmin of a score function over arms.

    ``scores(X)`` returns an n x m matrix of predicted costs; ties go to the
    lowest arm index.
    """
    scores: Callable[[np.ndarray], np.ndarray]
    n_arms: int

    def choices(self, X: np.ndarray) -> np.ndarray:
        return np.argmin(np.asarray(self.scores(np.atleast_2d(X)), dtype=float), axis=1)

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        chosen = self.choices(X)
        P = np.zeros((len(chosen), self.n_arms))
        P[np.arange(len(chosen)), chosen] = 1.0
        return P


def direct_policy(model) -> GreedyPolicy:
    """Greedy policy over a fitted outcome model's predictions."""
    return GreedyPolicy(scores=model.predict, n_arms=model.n_arms)


def anti_policy(scores: Callable[[np.ndarray], np.ndarray], n_arms: int) -> GreedyPolicy:
    """Argmax of the scores; the worst deterministic choice."""
    return GreedyPolicy(scores=lambda X: -np.asarray(scores(X)), n_arms=n_arms)
