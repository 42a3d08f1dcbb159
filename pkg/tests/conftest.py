import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsepad.grid import GridSpec, PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_spec():
    return GridSpec((0.0, 0.0, 0.0), 1.0)


def random_cloud(rng, n, extent=8.0):
    return PointCloud(rng.random((n, 3)) * extent)
