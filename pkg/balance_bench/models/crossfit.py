"""
Out-of-fold outcome predictions.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from sklearn.model_selection import KFold

from ..data import LoggedDataset
from ..errors import ConfigError, InsufficientDataError
from ..utils.logging import log_fallback

logger = logging.getLogger(__name__)

Fitter = Callable[..., object]


@dataclass(frozen=True)
class CrossfitResult:
    predictions: np.ndarray
    fallbacks: List[str] = field(default_factory=list)


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per row from a seeded shuffled partition."""
    assignment = np.empty(n, dtype=int)
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for k, (_, test) in enumerate(splitter.split(np.zeros((n, 1)))):
        assignment[test] = k
    return assignment


def crossfit(
    ds: LoggedDataset,
    fitter: Fitter,
    folds: int = 5,
    seed: int = 0
) -> CrossfitResult:
    """
    Predict mu_hat for each row from a model fit without that row's fold.

    ``fitter(train, missing_arm_value=...)`` must return a model with
    ``predict(X) -> n x m``. An arm absent from a training fold is predicted by
    the pooled training mean, and the fallback is recorded.

    Raises:
        ConfigError: folds < 2
        InsufficientDataError: n < folds
    """
    if folds < 2:
        raise ConfigError(f"crossfit.folds must be >= 2, got {folds}")
    if ds.n < folds:
        raise InsufficientDataError(f"crossfit needs n >= folds ({ds.n} < {folds})")

    assignment = fold_assignment(ds.n, folds, seed)
    predictions = np.empty((ds.n, ds.m))
    fallbacks: List[str] = []

    for k in range(folds):
        test = assignment == k
        train = ds.subset(np.flatnonzero(~test))
        counts = train.arm_counts()
        absent = [t for t in range(ds.m) if counts[t] == 0]
        pooled: Optional[float] = None
        if absent:
            pooled = float(train.Y.mean())
            arms = ", ".join(str(t + 1) for t in absent)
            message = f"fold {k + 1}: arm(s) {arms} absent from training rows; pooled mean used"
            fallbacks.append(message)
            log_fallback(logger, "arm_absent_in_fold", {'fold': k + 1, 'arms': arms})
        model = fitter(train, missing_arm_value=pooled)
        predictions[test] = model.predict(ds.X[test])

    return CrossfitResult(predictions=predictions, fallbacks=fallbacks)
