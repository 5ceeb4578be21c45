import numpy as np
import pytest
from hypothesis import settings

from ldcbf.core import ControlAffineModel

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


def integrator(n=1, lo=-3.0, hi=3.0):
    return ControlAffineModel(n, n, lambda x: np.zeros(np.shape(x)),
                              lambda x: np.eye(n) if np.ndim(x) == 1 else np.broadcast_to(np.eye(n), np.shape(x) + (n,)),
                              np.full(n, lo), np.full(n, hi))


def decay():
    return ControlAffineModel(1, 1, lambda x: -np.asarray(x, float), lambda x: np.zeros((1, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
