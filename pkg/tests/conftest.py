import numpy as np
import pytest

from hand_model import canonical_skeleton
from mesh_util import make_box, make_cylinder, make_sphere


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def skeleton():
    return canonical_skeleton()


@pytest.fixture(scope="session")
def sphere():
    """Sphere of radius 4 cm centered at the origin."""
    return make_sphere(0.04, subdivisions=3, object_id="sphere")


@pytest.fixture(scope="session")
def unit_cube():
    return make_box((1.0, 1.0, 1.0), object_id="cube")


@pytest.fixture(scope="session")
def grasp_box():
    return make_box((0.06, 0.04, 0.03), max_edge=0.01, object_id="box")


@pytest.fixture(scope="session")
def grasp_cylinder():
    return make_cylinder(0.025, 0.12, sections=32, max_edge=0.015, object_id="cylinder")
