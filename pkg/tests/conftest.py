import numpy as np
import pytest

from xbert import numerics as nx


@pytest.fixture(autouse=True)
def _finite_guard():
    """NaN/Inf detection is mandatory under test."""
    with nx.debug_mode(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
