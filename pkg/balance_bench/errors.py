"""
Exception hierarchy for balance-bench.

The CLI maps each family to an exit code: configuration problems exit 1,
data problems exit 2, numerical failures exit 3.
"""

from typing import Optional

import numpy as np


class BalanceBenchError(Exception):
    """Root of all balance-bench errors."""


class DataError(BalanceBenchError, ValueError):
    """Invalid or malformed input data."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ZeroPropensityError(DataError):
    """A propensity of zero was found on an observed arm."""


class NoOverlapError(DataError):
    """The evaluated policy puts no mass on any logged action."""


class MissingArmError(DataError):
    """One or more arms have no observations."""

    def __init__(self, missing_arms: list):
        arms = ", ".join(str(a + 1) for a in missing_arms)
        super().__init__(f"no observations for arm(s): {arms}")
        self.missing_arms = list(missing_arms)


class InsufficientDataError(DataError):
    """Too few observations to fit a model or compute a statistic."""


class ConfigError(BalanceBenchError, ValueError):
    """Invalid configuration."""


class UnsupportedExponentError(ConfigError):
    """Only the p = 2 balance objective is implemented."""

    def __init__(self, p: float):
        super().__init__(f"unsupported exponent p={p}; only p=2 is implemented")
        self.p = p


class NumericalError(BalanceBenchError, RuntimeError):
    """A numerical routine failed."""


class SingularSystemError(NumericalError):
    """A linear system stayed singular after ridge regularization."""


class SolverConvergenceError(NumericalError):
    """The weights QP did not reach the KKT tolerance."""

    def __init__(
        self,
        message: str,
        best_iterate: np.ndarray,
        residual: float,
        iterations: int
    ):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.best_iterate = best_iterate
        self.residual = residual
        self.iterations = iterations


class LearningError(NumericalError):
    """No learner restart produced a finite objective."""
