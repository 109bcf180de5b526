import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tgcc.graph import Graph

settings.register_profile("default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_adjacency(n, p, rng, weighted=False):
    upper = np.triu(rng.random((n, n)) < p, k=1).astype(float)
    if weighted:
        upper *= rng.uniform(0.2, 1.0, size=(n, n))
    return upper + upper.T


def random_graph(n=20, p=0.2, d=5, C=3, seed=0, weighted=False, connected=False):
    rng = np.random.default_rng(seed)
    A = random_adjacency(n, p, rng, weighted)
    if connected:
        for i in range(n - 1):
            if A[i, i + 1] == 0:
                A[i, i + 1] = A[i + 1, i] = 1.0
    labels = np.arange(n) % C
    rng.shuffle(labels)
    X = rng.normal(size=(n, d))
    perm = rng.permutation(n)
    k = n // 2
    splits = {"train": perm[:k], "val": perm[k : k + n // 4], "test": perm[k + n // 4 :]}
    return Graph(A, X, labels, splits, C)


@pytest.fixture
def small_graph():
    return random_graph(20, 0.25, 5, 3, seed=3, connected=True)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, passed: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
