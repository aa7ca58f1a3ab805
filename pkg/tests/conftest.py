import numpy as np
import pytest

from poiverify.corpus import generate_corpus
from poiverify.embedder import init_params


@pytest.fixture(scope="session")
def small_corpus():
    """40 train/valid POIs with 4 views each, plus 10 test POIs."""
    return generate_corpus(seed=3, n_pois=40, views_per_poi=4)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(l=3, d=4, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit_vectors(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""

    def report(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _CRITERIA[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
