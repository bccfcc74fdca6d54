import numpy as np
import pytest
from hypothesis import settings

from qlidar.core import FrameStack

settings.register_profile("qlidar", deadline=None, max_examples=40)
settings.load_profile("qlidar")


def random_stack(rng, n, h, w, high=4, density=0.3, gate=None):
    """Sparse small-count frames, the typical look of SPAD data."""
    vals = rng.integers(0, high + 1, size=(n, h, w))
    keep = rng.random((n, h, w)) < density
    return FrameStack((vals * keep).astype(np.uint8), gate=gate)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 10):
        ok, detail = ACCEPTANCE.get(k, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
