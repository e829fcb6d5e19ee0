import numpy as np
import pytest

from mvlab.engine import TimeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20191112)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 1000)


def brute_force_w2(xs, ys):
    """W2 between equal-size uniform clouds by enumerating all assignments."""
    from itertools import permutations

    xs, ys = np.asarray(xs, float).reshape(len(xs), -1), np.asarray(ys, float).reshape(len(ys), -1)
    best = min(np.mean(np.sum((xs - ys[list(perm)]) ** 2, axis=1)) for perm in permutations(range(len(ys))))
    return float(np.sqrt(best))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
