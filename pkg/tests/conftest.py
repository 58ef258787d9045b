import numpy as np
import pytest

from kagnn.graph import Graph


def random_graph(rng, n, p=0.3, dim=3, scale=1.0):
    """Erdos-Renyi graph with uniform features in [-scale, scale]."""
    upper = np.triu(rng.random((n, n)) < p, 1)
    i, j = np.nonzero(upper)
    edges = np.concatenate([np.stack([i, j], 1), np.stack([j, i], 1)]) if len(i) else None
    return Graph(x=rng.uniform(-scale, scale, size=(n, dim)), edges=edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
