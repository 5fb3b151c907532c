import numpy as np
import pytest

from tcglab.spectral import SpectralMeasure

# lines appended by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def random_measure(rng, size=None, low=1.0, high=10.0, min_gap=0.05):
    """Measure with distinct eigenvalues in [low, high] and weights bounded away from 0."""
    size = int(rng.integers(2, 12)) if size is None else size
    while True:
        lam = np.sort(rng.uniform(low, high, size))[::-1]
        if size == 1 or np.all(-np.diff(lam) >= min_gap * (high - low) / size):
            break
    w = rng.uniform(0.3, 1.5, size) * rng.choice([-1.0, 1.0], size)
    return SpectralMeasure(lam, w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
