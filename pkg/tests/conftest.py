import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from covreg.model import Dataset
from covreg.simulate import BETA0, ErrorLaw, draw_response, gen_model_a

settings.register_profile(
    "covreg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("covreg")


def random_pd(rng, p, floor=0.5):
    A = rng.normal(size=(p, p))
    return A @ A.T + floor * np.eye(p)


def model_a_data(n, p, seed, error="mixture", pd_floor=1.0):
    rng = np.random.default_rng(seed)
    fam, X = gen_model_a(n, p, rng, pd_floor=pd_floor)
    Y = draw_response(fam, BETA0, X, ErrorLaw(error), rng)
    return fam, Dataset(fam, X, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_adjacency(rng, p):
    """Symmetric, zero-diagonal, row-stochastic matrix (permuted random circulant)."""
    w = np.zeros(p)
    half = rng.random(p // 2 + 1) + 0.1
    for j in range(1, p):
        w[j] = half[min(j, p - j)]
    w /= w.sum()
    C = np.array([np.roll(w, i) for i in range(p)])
    perm = rng.permutation(p)
    return C[np.ix_(perm, perm)]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
