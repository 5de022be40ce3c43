from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from dualstream.geometry import Pose, intrinsics_from_fov, quat_from_axis_angle


@pytest.fixture
def k_small():
    return intrinsics_from_fov(69.0, 42.0, 64, 48)


@pytest.fixture
def k_vga():
    return intrinsics_from_fov(69.0, 42.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng: np.random.Generator, scale: float = 2.0) -> Pose:
    q = rng.normal(size=4)
    return Pose(tuple(rng.uniform(-scale, scale, 3)), tuple(q / np.linalg.norm(q)))


def yaw(deg: float) -> Pose:
    """Rotation about the vertical (camera Y) axis."""
    return Pose(rotation=quat_from_axis_angle((0, 1, 0), deg))


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
unit_quats = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 4).filter(
    lambda q: sum(c * c for c in q) > 1e-3)
poses = st.builds(lambda t, q: Pose(t, q), st.tuples(finite, finite, finite), unit_quats)


# --- acceptance summary -----------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def measured(request):
    """Record measured figures for the acceptance summary line."""
    mark = request.node.get_closest_marker("criterion")
    if mark is None:
        return lambda note: None
    return _criteria.setdefault(mark.args[0], {"title": mark.args[1], "ok": None, "notes": []})["notes"].append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    entry = _criteria.setdefault(mark.args[0], {"title": mark.args[1], "ok": None, "notes": []})
    entry["ok"] = rep.passed if entry["ok"] is None else entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] else "FAIL"
        notes = f"  ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n} {e['title']}: {status}{notes}")
