import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpslam.geometry import Pose
from gpslam.synth import room_loop_scene, synth_scan

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, max_trans=10.0, max_angle=np.pi) -> Pose:
    """Rotation uniform on SO(3) (or capped at ``max_angle``), translation uniform in a cube."""
    if max_angle >= np.pi:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return Pose(q, rng.uniform(-max_trans, max_trans, 3))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.exp(np.r_[axis * rng.uniform(0, max_angle), rng.uniform(-max_trans, max_trans, 3)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=None)
def _room(n_frames, noise_sigma, seed):
    scene = room_loop_scene(n_frames, noise_sigma=noise_sigma, seed=seed)
    scans = tuple(synth_scan(scene, k) for k in range(n_frames))
    return scene, scans


@pytest.fixture(scope="session")
def room50():
    """The 50-frame square loop in the cluttered room with 2 cm range noise."""
    return _room(50, 0.02, 0)


@pytest.fixture(scope="session")
def room_loop():
    return _room


ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES.append((number, f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
