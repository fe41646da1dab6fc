"""Shared fixtures for the test suite."""

import numpy as np
import pytest

import fairclust as fc


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_dataset():
    """Three identities in two groups, unit-norm rows, d=8."""
    spec = fc.SyntheticSpec(
        dim=8,
        seed=11,
        groups=(
            fc.GroupSpec("a", 2, (4, 4), 0.05),
            fc.GroupSpec("b", 1, (4, 4), 0.05),
        ),
    )
    return fc.l2_normalize(fc.generate_synthetic(spec))


@pytest.fixture
def tiny_hyper():
    return fc.Hyper(d=8, k=2, s=4, n_block=1, n_head=2, ff_dim=16)


@pytest.fixture
def tiny_params(tiny_hyper):
    return fc.init_params(tiny_hyper, seed=3)
