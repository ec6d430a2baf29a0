import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


class StubModel:
    """Stands in for a classifier: scores a standardized batch with ``fn``."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def predict_proba(self, images, batch_size=128):
        self.calls += len(images)
        return np.asarray(self.fn(images), dtype=np.float64)


def red_fraction(images):
    """Fraction of pixels that are pure red in a standardized batch."""
    px = (images / 4.0 + 0.5) * 255.0
    red = (px[:, 0] > 200) & (px[:, 1] < 60) & (px[:, 2] < 60)
    return red.mean(axis=(1, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
