import numpy as np
import pytest
import torch

from stlidar.data import BoxSpec, PlaneSpec, SyntheticSpec, generate_synthetic
from stlidar.sensor import SensorConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    """Small 8x32 scene, quick enough to train for a handful of iterations."""
    return SyntheticSpec(
        SensorConfig(8, 32, 10.0, -20.0, 30.0),
        planes=[PlaneSpec(2, 0.0, (-20, -10), (30, 10), intensity=0.4, drop_prob=0.1),
                PlaneSpec(1, 6.0, (-20, 0), (30, 5), intensity=0.7)],
        boxes=[BoxSpec((8, -3, 1), (3, 2, 2), velocity=(2, 0, 0), intensity=0.9)],
        n_frames=6,
        sensor_velocity=(3.0, 0.0, 0.0),
        holdout_interval=3,
    )


@pytest.fixture(scope="session")
def tiny_scene(tiny_spec):
    return generate_synthetic(tiny_spec, seed=3)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
