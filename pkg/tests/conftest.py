import numpy as np
import pytest

from gaussian_graph.geometry import Camera, look_at, make_camera
from gaussian_graph.synth import AnalyticScene, Checker, Plane, Rig, Solid, Sphere


def yaw_camera(size, yaw_deg, fov=60.0, radius=3.0, target=(0.0, 0.0, 0.0)):
    """Camera on a horizontal circle around `target`, looking at it."""
    a = np.radians(yaw_deg)
    eye = np.array([radius * np.sin(a), 0.0, -radius * np.cos(a)]) + np.asarray(target)
    return make_camera(size, size, fov, look_at(eye, target))


@pytest.fixture
def plane_scene():
    """Large checkered plane at z = 2 facing the origin."""
    plane = Plane(point=(0.0, 0.0, 2.0), normal=(0.0, 0.0, -1.0), extent=(20.0, 20.0),
                  albedo=Checker(0.25, (0.9, 0.2, 0.2), (0.1, 0.8, 0.3)))
    return AnalyticScene([plane], background=(0.0, 0.0, 0.0))


@pytest.fixture
def object_scene():
    """Sphere in front of a back wall; every ray from the rig hits something."""
    wall = Plane(point=(0.0, 0.0, 3.0), normal=(0.0, 0.0, -1.0), extent=(30.0, 30.0),
                 albedo=Checker(0.5, (0.8, 0.8, 0.7), (0.2, 0.3, 0.6)))
    ball = Sphere(center=(0.0, 0.0, 1.0), radius=0.6, albedo=Solid((0.9, 0.5, 0.1)))
    return AnalyticScene([wall, ball], background=(0.1, 0.1, 0.1))


@pytest.fixture
def front_rig():
    """Rig looking down +z from z = -2, so views see the plane/wall fixtures."""
    return Rig(target=(0.0, 0.0, 2.0), radius=4.0, height=0.0, spacing_deg=15.0, fov_deg=60.0)


def identity_camera(size=256, f=128.0, c=None):
    c = size / 2 if c is None else c
    return Camera(f, f, c, c, size, size, np.eye(4))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, title, detail = results[num]
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
