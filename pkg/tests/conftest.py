import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wbplan.mapping import DroneModel, build_dual_map, single_gap_world
from wbplan.planner import PlanRequest
from wbplan.trajectory import FlatState

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def drone():
    return DroneModel(0.3, 0.1)


def gap_request(width, height, center_yz=(0.0, 1.25), drone=None):
    """Plan request across a single full-room wall with one rectangular gap."""
    drone = drone or DroneModel()
    cloud, bounds, gap = single_gap_world(width, height, center_yz)
    dmap = build_dual_map(cloud, drone, bounds)
    z = 1.25
    req = PlanRequest(FlatState([bounds[0][0] + 1.0, 0.0, z]), FlatState([bounds[1][0] - 1.0, 0.0, z]), dmap)
    return req, gap


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
