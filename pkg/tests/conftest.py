import numpy as np
import pytest

from covertlab.model import RecordSet


def two_clusters(n: int = 200, seed: int = 0, gap: float = 8.0, spread: float = 0.3) -> RecordSet:
    """Balanced, widely separated Gaussian blobs in feature space; covert first."""
    rng = np.random.default_rng(seed)
    half = n // 2
    pos = rng.normal(0.0, spread, (half, 3)) + np.array([gap / 2, 0.0, 50.0])
    neg = rng.normal(0.0, spread, (half, 3)) + np.array([-gap / 2, 0.0, 50.0])
    return RecordSet(np.vstack([pos, neg]), np.r_[np.ones(half), -np.ones(half)])


@pytest.fixture
def separable():
    return two_clusters()


# acceptance verdicts, echoed in the terminal summary regardless of output capture
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
