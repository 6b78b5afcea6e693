import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from semcom3d.scene_io import CameraModel

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


def axis_camera(distance=3.0, size=64, focal=100.0):
    """Identity rotation camera on the +z axis looking at the origin."""
    return CameraModel(size, size, focal, np.eye(3), [0.0, 0.0, distance])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
