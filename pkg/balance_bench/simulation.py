"""
Synthetic environments and ground-truth oracles.

Example 1 is a five-component Gaussian mixture in the plane with
mu_t(x) = exp(1 - 1 / ||x - chi_t||). The kernel-expansion environment has
mean outcomes inside the RKHS of the RBF kernel, for rate experiments.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import softmax

from .data import LoggedDataset, Policy, TrueEnvironment, assignment_of
from .errors import ConfigError
from .kernels import KernelSpec, cross_gram
from .policies import GreedyPolicy
from .schema import MonteCarloEstimate

logger = logging.getLogger(__name__)

DEFAULT_PAPE_SAMPLES = 100_000


@dataclass(frozen=True)
class Example1Spec:
    m: int = 5
    n: int = 100
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ConfigError(f"example 1 needs m >= 2, got {self.m}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


def arm_centers(m: int) -> np.ndarray:
    """Covariate means: the origin for arm 1, the unit circle for the rest."""
    centers = np.zeros((m, 2))
    angles = 2 * np.pi * np.arange(m - 1) / (m - 1)
    centers[1:] = np.column_stack([np.cos(angles), np.sin(angles)])
    return centers


def outcome_centers(m: int) -> np.ndarray:
    """chi_t = (cos, sin)(-2 pi t / m) / sqrt(2) for 1-based t."""
    angles = -2 * np.pi * np.arange(1, m + 1) / m
    return np.column_stack([np.cos(angles), np.sin(angles)]) / np.sqrt(2)


def example1_mu(X: np.ndarray, m: int = 5) -> np.ndarray:
    """n x m matrix of exp(1 - 1/r) with r = ||x - chi_t||; 0 at r = 0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = np.linalg.norm(X[:, None, :] - outcome_centers(m)[None, :, :], axis=2)
    with np.errstate(divide='ignore'):
        values = np.exp(1.0 - 1.0 / r)
    return np.where(r > 0, values, 0.0)


def example1_phi(X: np.ndarray, m: int = 5) -> np.ndarray:
    """Bayes-rule P(T = t | x) for the equal-weight unit-covariance mixture."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sq = np.sum((X[:, None, :] - arm_centers(m)[None, :, :]) ** 2, axis=2)
    return softmax(-0.5 * sq, axis=1)


def example1_environment(m: int = 5, sigma: float = 1.0) -> TrueEnvironment:
    centers = arm_centers(m)

    def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
        arms = rng.integers(m, size=n)
        return centers[arms] + rng.standard_normal((n, 2))

    return TrueEnvironment(
        mu=lambda X: example1_mu(X, m),
        phi=lambda X: example1_phi(X, m),
        noise_sd=sigma,
        m=m,
        sample_covariates=sample_covariates,
        name="example1",
        params={'m': m, 'sigma': sigma}
    )


def gen_example1(spec: Example1Spec) -> Tuple[LoggedDataset, TrueEnvironment]:
    """
    Draw T uniformly, X | T around the arm centers and Y = mu_T(X) + sigma * eps.

    Returns:
        (dataset, environment)
    """
    rng = np.random.default_rng(spec.seed)
    env = example1_environment(spec.m, spec.sigma)
    T = rng.integers(spec.m, size=spec.n)
    X = arm_centers(spec.m)[T] + rng.standard_normal((spec.n, 2))
    Y = env.draw_outcomes(X, T, rng)
    return LoggedDataset(X=X, T=T, Y=Y, m=spec.m), env


def redraw_logged(env: TrueEnvironment, X: np.ndarray, rng: np.random.Generator) -> LoggedDataset:
    """Fresh (T, Y) given fixed covariates."""
    T = env.draw_treatments(X, rng)
    Y = env.draw_outcomes(X, T, rng)
    return LoggedDataset(X=X, T=T, Y=Y, m=env.m)


def sample_logged(env: TrueEnvironment, n: int, rng: np.random.Generator) -> LoggedDataset:
    return redraw_logged(env, env.sample_covariates(n, rng), rng)


def kernel_expansion_environment(
    m: int = 3,
    d: int = 2,
    n_centers: int = 10,
    sigma: float = 1.0,
    seed: int = 0,
    bandwidth: float = 1.0,
    propensity_strength: float = 0.5
) -> TrueEnvironment:
    """
    Environment whose mean outcomes are finite kernel expansions.

    mu_t(x) = sum_j a_tj k(x, c_j) with an identity-scale RBF kernel, so each
    mu_t has finite RKHS norm. Covariates are standard normal and the logging
    policy is a softmax-linear function of x.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_centers, d)) * 1.5
    coefficients = rng.standard_normal((m, n_centers))
    slopes = rng.standard_normal((m, d)) * propensity_strength
    return _kernel_expansion(m, d, centers, coefficients, slopes, sigma, bandwidth, {
        'm': m, 'd': d, 'n_centers': n_centers, 'sigma': sigma, 'seed': seed,
        'bandwidth': bandwidth, 'propensity_strength': propensity_strength
    })


def _kernel_expansion(m, d, centers, coefficients, slopes, sigma, bandwidth, params) -> TrueEnvironment:
    spec = KernelSpec(bandwidth=bandwidth, scale_matrix=np.eye(d))

    def mu(X: np.ndarray) -> np.ndarray:
        return cross_gram(spec, X, centers) @ coefficients.T

    def phi(X: np.ndarray) -> np.ndarray:
        return softmax(np.atleast_2d(X) @ slopes.T, axis=1)

    def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, d))

    env = TrueEnvironment(
        mu=mu, phi=phi, noise_sd=sigma, m=m,
        sample_covariates=sample_covariates, name="kernel_expansion", params=params
    )
    return env


def environment_config(env: TrueEnvironment) -> Dict[str, Any]:
    """Serializable description of a named environment."""
    if env.name not in ("example1", "kernel_expansion"):
        raise ConfigError(f"environment '{env.name}' cannot be serialized")
    return {'kind': env.name, **env.params}


def environment_from_config(config: Dict[str, Any]) -> TrueEnvironment:
    """Rebuild an environment written by :func:`environment_config`."""
    params = dict(config)
    kind = params.pop('kind', None)
    try:
        if kind == "example1":
            return example1_environment(m=int(params.get('m', 5)), sigma=float(params.get('sigma', 1.0)))
        if kind == "kernel_expansion":
            return kernel_expansion_environment(**params)
    except TypeError as exc:
        raise ConfigError(f"invalid environment parameters: {exc}") from exc
    raise ConfigError(f"unknown environment kind '{kind}'")


def optimal_policy(env: TrueEnvironment) -> GreedyPolicy:
    """Deterministic argmin of the true mean outcomes; ties to the lowest arm."""
    return GreedyPolicy(scores=env.mu_matrix, n_arms=env.m)


def sape(P, mu_matrix: np.ndarray) -> float:
    """(1/n) sum_i sum_t P[i, t] mu_t(X_i)."""
    P = P.P if hasattr(P, 'P') else np.asarray(P, dtype=float)
    mu_matrix = np.asarray(mu_matrix, dtype=float)
    return float(np.sum(P * mu_matrix)) / P.shape[0]


def _policy_values(policy: Policy, env: TrueEnvironment, X: np.ndarray) -> np.ndarray:
    P = assignment_of(policy, X, env.m).P
    return np.sum(P * env.mu_matrix(X), axis=1)


def _mean_with_error(values: np.ndarray) -> MonteCarloEstimate:
    size = len(values)
    std_error = float(np.std(values, ddof=1) / np.sqrt(size)) if size > 1 else 0.0
    return MonteCarloEstimate(value=float(np.mean(values)), std_error=std_error, size=size)


def pape_estimate(
    policy: Policy,
    env: TrueEnvironment,
    N: int = DEFAULT_PAPE_SAMPLES,
    seed: int = 0
) -> MonteCarloEstimate:
    """Population value of a policy by Monte Carlo over fresh covariates."""
    if N < 1:
        raise ConfigError(f"Monte Carlo size must be >= 1, got {N}")
    X = env.sample_covariates(N, np.random.default_rng(seed))
    return _mean_with_error(_policy_values(policy, env, X))


def regret(
    policy: Policy,
    env: TrueEnvironment,
    N: int = DEFAULT_PAPE_SAMPLES,
    seed: int = 0
) -> MonteCarloEstimate:
    """PAPE(policy) - PAPE(optimal) on common covariate draws."""
    if N < 1:
        raise ConfigError(f"Monte Carlo size must be >= 1, got {N}")
    X = env.sample_covariates(N, np.random.default_rng(seed))
    differences = _policy_values(policy, env, X) - _policy_values(optimal_policy(env), env, X)
    return _mean_with_error(differences)


def policy_region_grid(
    policy: Policy,
    bounds: Tuple[float, float, float, float] = (-3.0, 3.0, -3.0, 3.0),
    resolution: int = 100,
    n_arms: Optional[int] = None
) -> pd.DataFrame:
    """
    Most likely arm (1-based) on a regular grid over two covariates.

    Args:
        policy: Policy over 2-d covariates
        bounds: (x1_min, x1_max, x2_min, x2_max)
        resolution: Points per axis

    Returns:
        DataFrame with columns x1, x2, arm
    """
    if resolution < 2:
        raise ConfigError(f"resolution must be >= 2, got {resolution}")
    x1 = np.linspace(bounds[0], bounds[1], resolution)
    x2 = np.linspace(bounds[2], bounds[3], resolution)
    g1, g2 = np.meshgrid(x1, x2, indexing='ij')
    X = np.column_stack([g1.ravel(), g2.ravel()])
    P = assignment_of(policy, X, n_arms).P
    return pd.DataFrame({'x1': X[:, 0], 'x2': X[:, 1], 'arm': np.argmax(P, axis=1) + 1})
