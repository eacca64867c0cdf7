import numpy as np
import pytest

from motionprior.generators import default_dataset, generate_synthetic_clip
from motionprior.robot import RobotGeometry
from motionprior.sim import SimConfig


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running training checks (acceptance suite)")


@pytest.fixture(scope="session")
def geom():
    return RobotGeometry()


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def dataset(geom):
    return default_dataset(geom)


@pytest.fixture(scope="session")
def walk_clip(geom):
    return generate_synthetic_clip("walk", geom, speed=1.0, duration=2.0)


@pytest.fixture(scope="session")
def hop_clip(geom):
    return generate_synthetic_clip("hop", geom, speed=0.4, duration=3.0)


@pytest.fixture(scope="session")
def stand_clip(geom):
    return generate_synthetic_clip("stand", geom, duration=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
