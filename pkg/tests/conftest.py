import numpy as np
import pytest

from layersplat.geometry import CameraIntrinsics
from layersplat.runtime import get_threads, set_threads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cam():
    return CameraIntrinsics.centered(40.0, 24, 16)


@pytest.fixture
def restore_threads():
    n = get_threads()
    yield
    set_threads(n)


ACCEPTANCE = []  # (number, title, passed, detail), filled by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
