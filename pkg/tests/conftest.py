from pathlib import Path

import numpy as np
import pytest

from cryptorec.data import compute_statistics, synthetic_ratings

ROOT = Path(__file__).resolve().parent.parent
ML100K = ROOT / "data" / "ml-100k" / "u.data"
ML1M = ROOT / "data" / "ml-1m" / "ratings.dat"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return compute_statistics(synthetic_ratings(60, 20, 0.3, seed=3))


def random_dense(rng, n, m, density=0.5):
    R = rng.integers(1, 6, (n, m))
    R[rng.random((n, m)) > density] = 0
    for u in range(n):
        if not R[u].any():
            R[u, rng.integers(m)] = rng.integers(1, 6)
    return R


# acceptance criterion -> (status, detail), printed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
