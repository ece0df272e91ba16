"""
Shared fixtures for the balance-bench test suite.
"""

import numpy as np
import pytest

from balance_bench.balance import BalanceConfig, build_grams
from balance_bench.data import LoggedDataset
from balance_bench.kernels import KernelSpec
from balance_bench.simulation import Example1Spec, gen_example1
from balance_bench.utils.io import write_dataset_csv


def random_instance(seed: int, n: int, m: int = 2, d: int = 2):
    """Random covariates, treatments with every arm present, and a random policy."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    T = np.arange(n) % m
    rng.shuffle(T)
    Y = rng.standard_normal(n)
    logits = rng.standard_normal((n, m))
    P = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return LoggedDataset(X=X, T=T, Y=Y, m=m), P


@pytest.fixture
def make_instance():
    return random_instance


@pytest.fixture
def identity_cfg():
    """Identity-scale kernel so tests do not depend on the sample covariance."""
    return BalanceConfig(gamma=1.0, lam=1.0, kernel=KernelSpec(bandwidth=1.0, scale_matrix=np.eye(2)))


@pytest.fixture
def example1():
    """Small Example-1 draw with its environment."""
    return gen_example1(Example1Spec(n=60, sigma=1.0, seed=3))


@pytest.fixture
def example1_noiseless():
    return gen_example1(Example1Spec(n=40, sigma=0.0, seed=5))


@pytest.fixture
def instance(identity_cfg):
    ds, P = random_instance(11, n=20, m=3)
    return ds, P, build_grams(identity_cfg, ds.X, ds.m)


@pytest.fixture
def dataset_csv(tmp_path, example1):
    ds, _ = example1
    return write_dataset_csv(ds, tmp_path / "data.csv")
