"""Shared fixtures: small cameras, scenes and clouds."""

import numpy as np
import pytest

from deskrecon.geom import CameraView, Intrinsics, Pose
from deskrecon.scenes import make_scene


def orbit_view(vid, azimuth_deg, radius=3.0, height=0.5, size=64, fov=60.0, target=(0.0, 0.0, 0.0)):
    a = np.deg2rad(azimuth_deg)
    eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
    return CameraView(vid, Intrinsics.from_fov(size, size, fov), Pose.look_at(eye, target))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def view_pair():
    """Two cameras 60 degrees apart on a circle around the origin."""
    return orbit_view(0, 0.0), orbit_view(1, 60.0)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene("sphere-room", 0, resolution=24, gt_gaussians=1500, sfm_count=300,
                      n_candidates=12, n_test=3)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
