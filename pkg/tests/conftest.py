"""Shared fixtures: seeded generators, a quarter-width model and a small synthetic dataset."""
import numpy as np
import pytest

from mcdnet.config import ModelConfig
from mcdnet.data import generate_synthetic
from mcdnet.model import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    """Every width scaled by 1/4; same topology as the full network."""
    return ModelConfig(channel_scale=0.25)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_model64(tiny_config):
    """Float64 copy for gradient and equivalence checks."""
    return build_model(tiny_config, seed=0, dtype=np.float64)


@pytest.fixture
def synthetic_samples():
    return generate_synthetic(8, 32, fraction_range=(0.1, 0.2), seed=3)
