import numpy as np
import pytest

from mzimodel import chip as chipmod
from mzimodel import data as datamod


@pytest.fixture(scope="session")
def chip0():
    return chipmod.default_chip(seed=0)


@pytest.fixture(scope="session")
def degenerate_chip():
    """Noise-free chip whose physics is exactly the analytical form."""
    base = chipmod.default_chip(seed=11, noise_sigma_db=0.0, excess_sigma=0.0)
    return base


@pytest.fixture(scope="session")
def dataset0(chip0):
    """Full default-protocol dataset: 4400 train (189 sweep), 100 val, 700 test."""
    full = chipmod.acquire(chip0, 5011, seed=42)
    return datamod.split(full, 4400, 100, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
