import numpy as np
import pytest

from reinpool.store import MultiVectorDoc, MultiVectorQuery, Qrels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_corpus():
    docs = [
        MultiVectorDoc("d0", np.array([[1.0, 0.0], [0.0, 1.0]])),
        MultiVectorDoc("d1", np.array([[0.6, 0.8]])),
        MultiVectorDoc("d2", np.array([[-1.0, 0.0], [0.0, -1.0], [0.5, 0.5]])),
    ]
    queries = [
        MultiVectorQuery("q0", np.array([[1.0, 0.1]])),
        MultiVectorQuery("q1", np.array([[0.6, 0.8]])),
    ]
    qrels = Qrels()
    qrels.add("q0", "d0", 1)
    qrels.add("q1", "d1", 1)
    return docs, queries, qrels


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
