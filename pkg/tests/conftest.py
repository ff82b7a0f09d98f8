import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kaq.sim import ComplexSystem, build_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def qpsk_small():
    """2x2 complex system (M = N = 4) with per-axis levels {-1, +1}."""
    return ComplexSystem(2, 2, (-1.0, 1.0))


@pytest.fixture(scope="session")
def small_dataset(qpsk_small):
    return build_dataset(qpsk_small, 600, [5.0, 10.0, 15.0], seed=3)
