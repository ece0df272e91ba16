"""
Nuisance models: propensities, outcome regressions, cross-fitting and tuning.
"""

from .crossfit import CrossfitResult, crossfit, fold_assignment
from .outcome import (
    ArmMeanOutcome,
    KernelRidgeOutcome,
    OutcomeKind,
    fit_arm_means,
    fit_kernel_ridge_per_arm,
    outcome_fitter,
)
from .propensity import (
    GaussianDiscriminantPropensity,
    KnownPropensity,
    MultinomialLogitPropensity,
    PropensityKind,
    fit_gaussian_discriminant,
    fit_multinomial_logit,
    fit_propensity,
)
from .tuning import TuningGrid, apply_tuning, gp_log_marginal_likelihood, tune_hyperparameters

__all__ = [
    'ArmMeanOutcome',
    'CrossfitResult',
    'GaussianDiscriminantPropensity',
    'KernelRidgeOutcome',
    'KnownPropensity',
    'MultinomialLogitPropensity',
    'OutcomeKind',
    'PropensityKind',
    'TuningGrid',
    'apply_tuning',
    'crossfit',
    'fit_arm_means',
    'fit_gaussian_discriminant',
    'fit_kernel_ridge_per_arm',
    'fit_multinomial_logit',
    'fit_propensity',
    'fold_assignment',
    'gp_log_marginal_likelihood',
    'outcome_fitter',
    'tune_hyperparameters',
]
