import numpy as np
import pytest

from possmix.core import MixtureParams, PitchBounds
from possmix.simulate import make_rng

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(rng, K=2, E=3, lo=0.5, hi=3.0, bounds=None):
    """Valid mixture with dense positive transition rows."""
    pi = rng.dirichlet(np.ones(K) * 2.0)
    gamma = rng.dirichlet(np.ones(E + 1), size=(K, E + 1))
    rho = rng.uniform(lo, hi, size=(K, E + 1, 2))
    eta = rng.uniform(lo, hi, size=(K, 2, E + 1))
    return MixtureParams(pi, gamma, rho, eta, bounds or PitchBounds())


@pytest.fixture
def rng():
    return make_rng(12345)
