import numpy as np
import pytest

from pentidef.datahub import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_separable(n=200, seed=0):
    """Two well separated blobs in the plane."""
    r = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = r.normal(0, 0.5, (n, 2)) + np.where(y[:, None] == 1, 2.0, -2.0)
    return Dataset(X, y)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
