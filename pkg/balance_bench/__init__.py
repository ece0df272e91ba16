"""
balance-bench: balanced off-policy evaluation and learning.

This package estimates the cost of a treatment policy from logged
observational data by solving for weights that minimize the worst-case
conditional mean squared error over an RKHS, learns softmax-linear policies
through the implicit gradient of those weights, and benchmarks both against
inverse-propensity and direct baselines on synthetic data.
"""

__version__ = "0.1.0"
__author__ = "balance-bench Team"
__description__ = "Balanced off-policy evaluation and learning benchmark"

from .balance import BalanceConfig, SolverOptions, WeightsSolution, solve_weights
from .data import LoggedDataset, PolicyAssignment, TrueEnvironment, validate_dataset
from .estimators import estimate, evaluate_balanced
from .kernels import KernelSpec, gram_matrix
from .learner import LearnerConfig, LearningResult, learn_balanced, learn_balanced_dr
from .schema import (
    EstimatorMethod,
    EvaluationReport,
    LearnedPolicyReport,
    LearnerMethod,
    RateReport,
    ReplicationReport,
)

__all__ = [
    "BalanceConfig",
    "SolverOptions",
    "WeightsSolution",
    "solve_weights",
    "LoggedDataset",
    "PolicyAssignment",
    "TrueEnvironment",
    "validate_dataset",
    "estimate",
    "evaluate_balanced",
    "KernelSpec",
    "gram_matrix",
    "LearnerConfig",
    "LearningResult",
    "learn_balanced",
    "learn_balanced_dr",
    "EstimatorMethod",
    "EvaluationReport",
    "LearnedPolicyReport",
    "LearnerMethod",
    "RateReport",
    "ReplicationReport",
]
