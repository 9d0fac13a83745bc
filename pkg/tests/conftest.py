import os
import sys

import numpy as np
import pytest

now_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(now_dir)

from obshom.lib.grid import Grid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def line():
    """Dirichlet grid on [-1, 1] with h = 2^-6."""
    return Grid.box(-1.0, 1.0, 2.0**-6, dim=1)


@pytest.fixture
def square():
    """Dirichlet grid on [-1, 1]^2 with h = 2^-5."""
    return Grid.box([-1.0, -1.0], [1.0, 1.0], 2.0**-5)
