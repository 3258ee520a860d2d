import numpy as np
import pytest

from summuscat.muscat import MuscatModel
from summuscat.tensor import FULL_DEGENERATE, TEMPORAL_RETAINED


def random_muscat(rng, L=None, K=None, N=None, mode=FULL_DEGENERATE, n_times=None, lambda_cp=None,
                  beta_simplex=None, backend=None):
    """A small random model, parameter vector and sample."""
    L = L or int(rng.integers(1, 4))
    K = K or int(rng.integers(1, 4))
    N = N or int(rng.integers(1, 6))
    n_times = n_times or (int(rng.integers(1, 6)) if mode == TEMPORAL_RETAINED else 0)
    lam = float(rng.uniform(0.0, 1.0)) if lambda_cp is None else lambda_cp
    beta = float(rng.uniform(0.0, 2.0)) if beta_simplex is None else beta_simplex
    model = MuscatModel(N=N, L=L, K=K, mode=mode, n_times=n_times, lambda_cp=lam, beta_simplex=beta,
                        backend=backend)
    theta = rng.normal(0.0, 0.7, size=model.size)
    x = rng.normal(size=(L, N))
    t = int(rng.integers(0, n_times)) if mode == TEMPORAL_RETAINED else 0
    y = float(rng.normal())
    return model, theta, x, t, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[FULL_DEGENERATE, TEMPORAL_RETAINED])
def mode(request):
    return request.param


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    print(ACCEPTANCE[criterion])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=str):
            terminalreporter.write_line(ACCEPTANCE[key])
