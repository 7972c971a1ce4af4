import sys

import numpy as np
import pytest

from grelu.graph import Graph, synthetic_sbm


@pytest.fixture(scope="session")
def sbm():
    """The 4 x 25 block-model fixture shared by the training tests."""
    return synthetic_sbm(4, 25, 0.3, 0.02, 16, seed=0)


@pytest.fixture
def edge2():
    """Two nodes joined by one edge."""
    return Graph.from_edges(2, [(0, 1)], np.eye(2), [0, 1], 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(rng, n, p=0.2, feat_dim=3, classes=2):
    a = np.triu(rng.random((n, n)) < p, 1)
    r, c = np.nonzero(a)
    labels = np.arange(n) % classes
    return Graph.from_edges(n, list(zip(r, c)), rng.standard_normal((n, feat_dim)), labels, classes)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        verdict, title, detail = results[num]
        detail = " ".join(detail.split())
        terminalreporter.write_line(f"criterion {num:2d} {verdict}: {title}" + (f" ({detail})" if detail else ""))
