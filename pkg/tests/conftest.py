from contextlib import contextmanager

import pytest

from mmhop.model import nominal_params
from mmhop.optimize import HopProblem, solve_hop

HEIGHTS = (0.1, 0.2, 0.3, 0.4, 0.5)
_CRITERIA = []


@pytest.fixture(scope="session")
def double_params():
    return nominal_params("double")


@pytest.fixture(scope="session")
def single_params():
    return nominal_params("single")


def _sweep(params):
    return {H: solve_hop(HopProblem(params, H)) for H in HEIGHTS}


@pytest.fixture(scope="session")
def double_solutions(double_params):
    return _sweep(double_params)


@pytest.fixture(scope="session")
def single_solutions(single_params):
    return _sweep(single_params)


@pytest.fixture
def criterion():
    """Context manager that records a PASS/FAIL line for an acceptance check."""

    @contextmanager
    def record(number, title):
        try:
            yield
        except BaseException:
            line = f"criterion {number}: FAIL  {title}"
            _CRITERIA.append(line)
            print(line)
            raise
        line = f"criterion {number}: PASS  {title}"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
