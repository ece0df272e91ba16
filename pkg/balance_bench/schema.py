"""
Pydantic models for balance-bench reports.
Every JSON artifact the library or CLI emits is one of these models.
"""

from enum import Enum
from typing import List, Optional, Dict

from pydantic import BaseModel, Field, model_validator

SCHEMA_VERSION = "1.0"


class EstimatorMethod(str, Enum):
    """Supported policy-evaluation methods."""
    BALANCED = "balanced"
    BALANCED_DR = "balanced-dr"
    IPW = "ipw"
    NIPW = "nipw"
    CIPW = "cipw"
    NCIPW = "ncipw"
    DR = "dr"
    DIRECT = "direct"

    @property
    def uses_propensity(self) -> bool:
        return self in (
            EstimatorMethod.IPW, EstimatorMethod.NIPW, EstimatorMethod.CIPW,
            EstimatorMethod.NCIPW, EstimatorMethod.DR
        )

    @property
    def uses_outcome_model(self) -> bool:
        return self in (
            EstimatorMethod.BALANCED_DR, EstimatorMethod.DR, EstimatorMethod.DIRECT
        )


class LearnerMethod(str, Enum):
    """Supported policy-learning methods."""
    BALANCED = "balanced"
    BALANCED_DR = "balanced-dr"
    IPW_LOGIT = "ipw-logit"
    DR_LOGIT = "dr-logit"
    DIRECT = "direct"


class Violation(BaseModel):
    """A single broken dataset invariant."""
    row: Optional[int] = Field(None, ge=0, description="Row index (0-based) if row-specific")
    message: str = Field(..., description="Human-readable description")


class ValidationResult(BaseModel):
    """Outcome of dataset validation; violations are data, not exceptions."""
    violations: List[Violation] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]


class ObjectiveParts(BaseModel):
    """Decomposition of the worst-case CMSE objective."""
    objective: float = Field(..., ge=0, description="Total objective value")
    imbalance_sq: List[float] = Field(..., description="Per-arm squared imbalance")
    imbalance: List[float] = Field(..., description="Per-arm imbalance (square root)")
    variance_term: float = Field(..., ge=0, description="(1/n^2) W^T Lambda W")
    kkt_residual: Optional[float] = Field(None, ge=0)
    iterations: Optional[int] = Field(None, ge=0)


class EvaluationReport(BaseModel):
    """Result of evaluating one policy with one method."""
    schema_version: str = SCHEMA_VERSION
    estimate: float = Field(..., description="Estimated policy cost")
    method: EstimatorMethod = Field(..., description="Evaluation method")
    n: int = Field(..., ge=1, description="Number of logged observations")
    weights_support: Optional[int] = Field(None, ge=0, description="#{i: W_i > tau_act}")
    weights: Optional[List[float]] = Field(None, description="Weights used, if any")
    objective_parts: Optional[ObjectiveParts] = Field(None, description="Balance diagnostics")
    dr_used: bool = Field(False, description="Whether the doubly robust correction was used")
    clip: Optional[float] = Field(None, description="Clip level for clipped methods")
    crossfit_fallbacks: List[str] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)


class MethodSummary(BaseModel):
    """One row of a replication report."""
    method: str = Field(..., description="Method label")
    rmse: Optional[float] = None
    bias: Optional[float] = None
    sd: Optional[float] = None
    dr_rmse: Optional[float] = None
    dr_bias: Optional[float] = None
    dr_sd: Optional[float] = None
    support_mean: Optional[float] = None
    support_sd: Optional[float] = None
    mean_regret: Optional[float] = None
    regret_sd: Optional[float] = None
    failures: int = Field(0, ge=0, description="Replications where the method failed")


class ReplicationReport(BaseModel):
    """Aggregated evaluation or learning benchmark."""
    schema_version: str = SCHEMA_VERSION
    mode: str = Field(..., description="'evaluation' or 'learning'")
    replications: int = Field(..., ge=1)
    seed: int
    n: int = Field(..., ge=1)
    sigma: float = Field(..., ge=0)
    target: Optional[float] = Field(None, description="Fixed-X SAPE of the evaluated policy")
    rows: List[MethodSummary] = Field(default_factory=list)

    @model_validator(mode='after')
    def _rows_unique(self) -> 'ReplicationReport':
        labels = [row.method for row in self.rows]
        if len(labels) != len(set(labels)):
            raise ValueError('duplicate method rows')
        return self

    def row(self, method: str) -> MethodSummary:
        for summary in self.rows:
            if summary.method == method:
                return summary
        raise KeyError(method)


class SlopeFit(BaseModel):
    """Log-log regression of RMSE against n."""
    slope: float
    intercept: float
    std_error: float = Field(..., ge=0)
    ci_low: float
    ci_high: float


class RateReport(BaseModel):
    """Convergence-rate experiment output."""
    schema_version: str = SCHEMA_VERSION
    seed: int
    replications: int = Field(..., ge=2)
    n_grid: List[int]
    rmse: Dict[str, List[float]] = Field(..., description="Method -> RMSE per grid size")
    fits: Dict[str, SlopeFit] = Field(..., description="Method -> log-log fit")


class MonteCarloEstimate(BaseModel):
    """A Monte Carlo average with its standard error."""
    value: float
    std_error: float = Field(..., ge=0)
    size: int = Field(..., ge=1)


class TuningPoint(BaseModel):
    """One grid point of the marginal-likelihood search."""
    bandwidth: float = Field(..., gt=0)
    gamma: float = Field(..., gt=0)
    noise_var: float = Field(..., gt=0)
    log_likelihood: float


class TuningResult(BaseModel):
    """Selected hyperparameters plus the scored grid."""
    schema_version: str = SCHEMA_VERSION
    best: TuningPoint
    grid: List[TuningPoint]


class TraceEntry(BaseModel):
    """One accepted BFGS iteration."""
    iteration: int = Field(..., ge=1)
    objective: float
    grad_norm: float = Field(..., ge=0)
    active_set_size: Optional[int] = Field(None, ge=0)


class LearnedPolicyReport(BaseModel):
    """Learned logit policy as written by the CLI."""
    schema_version: str = SCHEMA_VERSION
    method: LearnerMethod
    beta: Optional[List[List[float]]] = Field(None, description="m x (d+1), intercept first")
    objective: Optional[float] = None
    restart_objectives: List[float] = Field(default_factory=list)
    converged: bool = False
    regret: Optional[MonteCarloEstimate] = None
