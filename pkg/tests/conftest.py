import numpy as np
import pytest

from smokeview.image import CameraView, Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=8, w=8) -> Image:
    return Image(rng.uniform(0.0, 1.0, size=(h, w, 3)))


def identity_camera(f=20.0, w=16, h=16) -> CameraView:
    return CameraView(f, f, w / 2, h / 2, np.eye(3), np.zeros(3), w, h)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
