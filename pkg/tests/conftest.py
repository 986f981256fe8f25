import numpy as np
import pytest

from revtime.grid import GridSpec, build_grid


def make_grid(n=17, T=1.0, dim=1, nt=None, length=1.0):
    return build_grid(GridSpec(dim, (length,) * dim, (n,) * dim, nt or n, T))


@pytest.fixture
def grid17():
    return make_grid(17)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
