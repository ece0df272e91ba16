"""
Kernel specifications and Gram matrices.

Only the Mahalanobis RBF kernel ships:

    k(x, x') = exp(-(x - x')^T S^{-1} (x - x') / s^2)

where S is either given or the ridge-regularized sample covariance.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError, InsufficientDataError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
COVARIANCE_RIDGE = 1e-8


class KernelKind(str, Enum):
    MAHALANOBIS_RBF = "mahalanobis_rbf"


def sample_covariance(X: np.ndarray) -> np.ndarray:
    """
    Ridge-regularized sample covariance with the (n-1) denominator.

    Adds eps * I with eps = 1e-8 * trace(S) / d, or 1e-8 when the trace is 0.

    Raises:
        InsufficientDataError: fewer than two rows
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if n < 2:
        raise InsufficientDataError(f"covariance undefined for n={n} (need at least 2 rows)")
    return regularize_covariance(np.atleast_2d(np.cov(X, rowvar=False, ddof=1)))


def regularize_covariance(S: np.ndarray) -> np.ndarray:
    """S + eps * I with eps relative to the mean variance."""
    d = S.shape[0]
    trace = float(np.trace(S))
    eps = COVARIANCE_RIDGE * trace / d if trace > 0 else COVARIANCE_RIDGE
    return S + eps * np.eye(d)


@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel description.

    ``scale_matrix=None`` means "estimate from the sample"; call
    :func:`resolve_spec` before evaluating.
    """
    bandwidth: float = 1.0
    scale_matrix: Optional[np.ndarray] = None
    kind: KernelKind = KernelKind.MAHALANOBIS_RBF

    def __post_init__(self) -> None:
        if not self.bandwidth > 0:
            raise ConfigError(f"kernel bandwidth must be > 0, got {self.bandwidth}")
        if self.scale_matrix is not None:
            S = np.atleast_2d(np.array(self.scale_matrix, dtype=float, copy=True))
            if S.shape[0] != S.shape[1]:
                raise ConfigError(f"scale matrix must be square, got shape {S.shape}")
            if not np.allclose(S, S.T, atol=1e-10):
                raise ConfigError("scale matrix must be symmetric")
            if np.linalg.eigvalsh(S).min() <= 0:
                raise ConfigError("scale matrix must be positive definite")
            S.setflags(write=False)
            object.__setattr__(self, 'scale_matrix', S)

    @property
    def resolved(self) -> bool:
        return self.scale_matrix is not None

    def cache_key(self) -> Tuple:
        scale = None if self.scale_matrix is None else self.scale_matrix.tobytes()
        return (self.kind.value, float(self.bandwidth), scale)


def resolve_spec(spec: KernelSpec, X: np.ndarray) -> KernelSpec:
    """Fill in the sample covariance if the spec asks for it."""
    if spec.resolved:
        return spec
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        logger.warning(
            "scale 'sample' needs at least 2 rows; using the identity",
            extra={'event': 'fallback', 'reason': 'identity_scale', 'n': X.shape[0]}
        )
        return replace(spec, scale_matrix=np.eye(X.shape[1]))
    return replace(spec, scale_matrix=sample_covariance(X))


def _whiten(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    if not spec.resolved:
        raise ConfigError("kernel scale is unresolved; call resolve_spec first")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = spec.scale_matrix.shape[0]
    if X.shape[1] != d:
        raise DataError(f"covariates have dimension {X.shape[1]}, kernel expects {d}")
    L = cholesky(spec.scale_matrix, lower=True)
    # rows of Z are L^{-1} x so that ||z - z'||^2 is the Mahalanobis distance
    return solve_triangular(L, X.T, lower=True).T


def kernel_eval(spec: KernelSpec, x: np.ndarray, x_prime: np.ndarray) -> float:
    """Single kernel value; 1 iff x == x'."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    x_prime = np.asarray(x_prime, dtype=float).reshape(1, -1)
    if x.shape != x_prime.shape:
        raise DataError(f"dimension mismatch: {x.shape[1]} vs {x_prime.shape[1]}")
    if np.array_equal(x, x_prime):
        return 1.0
    return float(cross_gram(spec, x, x_prime)[0, 0])


def cross_gram(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Rectangular kernel matrix k(A_i, B_j)."""
    ZA = _whiten(spec, A)
    ZB = _whiten(spec, B)
    return np.exp(-cdist(ZA, ZB, 'sqeuclidean') / spec.bandwidth ** 2)


@dataclass(frozen=True)
class GramMatrix:
    """Square kernel matrix with its provenance."""
    K: np.ndarray
    spec: KernelSpec

    @property
    def n(self) -> int:
        return int(self.K.shape[0])

    def check(self) -> None:
        """Raise DataError if symmetry, unit diagonal or PSD fail."""
        if np.max(np.abs(self.K - self.K.T), initial=0.0) > SYMMETRY_TOL:
            raise DataError("Gram matrix is not symmetric")
        if not np.allclose(np.diag(self.K), 1.0):
            raise DataError("RBF Gram matrix diagonal must be 1")
        if self.n and np.linalg.eigvalsh(self.K).min() < -PSD_TOL:
            raise DataError("Gram matrix is not positive semidefinite")


def gram_matrix(spec: KernelSpec, X: np.ndarray) -> GramMatrix:
    """
    Gram matrix K[i, j] = k(X_i, X_j), mirrored to be exactly symmetric.

    An unresolved spec is resolved on X itself.
    """
    spec = resolve_spec(spec, X)
    K = cross_gram(spec, X, X)
    K = np.triu(K) + np.triu(K, 1).T
    np.fill_diagonal(K, 1.0)
    K.setflags(write=False)
    return GramMatrix(K=K, spec=spec)


def _array_digest(X: np.ndarray) -> str:
    X = np.ascontiguousarray(X, dtype=float)
    return hashlib.sha1(X.tobytes() + str(X.shape).encode()).hexdigest()


class GramCache:
    """Memoize Gram matrices per (kernel, covariates) pair."""

    def __init__(self) -> None:
        self._store: Dict[Tuple, GramMatrix] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, spec: KernelSpec, X: np.ndarray) -> GramMatrix:
        key = (spec.cache_key(), _array_digest(X))
        with self._lock:
            cached = self._store.get(key)
            if cached is not None:
                self.hits += 1
                return cached
        gram = gram_matrix(spec, X)
        with self._lock:
            self.misses += 1
            self._store.setdefault(key, gram)
            return self._store[key]

    def __len__(self) -> int:
        return len(self._store)

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
