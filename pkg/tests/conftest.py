import numpy as np
import pytest

from seesmp.core import GalerkinSystem, build_time_grid, sample_brownian


@pytest.fixture
def grid16():
    return build_time_grid(1.0, 16)


@pytest.fixture
def ens16(grid16):
    return sample_brownian(grid16, 64, 5)


def zero_system(n=1):
    return GalerkinSystem(np.zeros((n, n)), np.zeros((n, n)))
