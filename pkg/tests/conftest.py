import numpy as np
import pytest

from tests.fixtures import build_las, forest_cloud


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def forest_las(tmp_path, rng):
    """A 20 m x 20 m LAS 1.2 tile with ground on every grid node and canopy returns above."""
    x, y, z, classification = forest_cloud(rng)
    path = tmp_path / "forest.las"
    path.write_bytes(build_las(x, y, z, classification))
    return path
