import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatsurf.scene import Camera, bundled_spec, generate_scene, sample_trajectory

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def plane_scene():
    return generate_scene(bundled_spec("plane"), 0)


@pytest.fixture(scope="session")
def plane_views(plane_scene):
    return sample_trajectory(plane_scene, 6, (0.3, 0.7), seed=0)


@pytest.fixture(scope="session")
def room_scene():
    return generate_scene(bundled_spec("room"), 0)


@pytest.fixture(scope="session")
def room_views(room_scene):
    return sample_trajectory(room_scene, 6, (0.3, 0.7), seed=0)


@pytest.fixture
def origin_camera():
    """64x64 camera at the origin looking down +z."""
    return Camera(50.0, 50.0, 32.0, 32.0, 64, 64)


def plane_spec(center, normal, size=(20.0, 20.0)):
    return {"primitives": [{"type": "plane", "center": list(center), "normal": list(normal),
                            "size": list(size)}]}


def sphere_spec(center, radius):
    return {"primitives": [{"type": "sphere", "center": list(center), "radius": radius}]}


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store a one-line verdict for the end-of-run acceptance summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
