import numpy as np
import pytest

from subgdiff.graph import MolGraph


def path_graph(n=4, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.cumsum(rng.normal(size=(n, 3)), axis=0)
    return MolGraph([6] * n, [(i, i + 1, 1) for i in range(n - 1)], coords)


@pytest.fixture
def path4():
    return path_graph(4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, name, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
