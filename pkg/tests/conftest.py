from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from distillcache.teacher import SyntheticScene, synth_teacher

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _criteria.append((props["criterion"], report.outcome, props.get("measured", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in _criteria:
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"{status}  {name}"
        terminalreporter.write_line(f"{line}  [{measured}]" if measured else line)


@pytest.fixture(autouse=True)
def _record_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args[0])


@pytest.fixture
def measured(record_property):
    """Attach measured values to the acceptance summary line."""
    parts = []

    def add(**values):
        for k, v in values.items():
            parts.append(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}")
        record_property("measured", ", ".join(parts))
    return add


def make_image_tree(root: Path, scenes: dict, size=(8, 6)) -> Path:
    """``scenes`` maps scene name -> frame count; writes tiny PNGs."""
    for scene, n in scenes.items():
        d = root / scene
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.new("L", size).save(d / f"{i:03d}.png")
    return root


@pytest.fixture
def image_tree(tmp_path):
    def _make(scenes, name="data", size=(8, 6)):
        return make_image_tree(tmp_path / name, scenes, size)
    return _make


@pytest.fixture
def teacher2():
    return synth_teacher(SyntheticScene(seed=3, n_views=2, height=40, width=60))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
