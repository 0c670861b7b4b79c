import numpy as np
import pytest

from siamxd import autodiff


@pytest.fixture(autouse=True)
def _check_finite():
    prev = autodiff.CHECK_FINITE
    autodiff.CHECK_FINITE = True
    yield
    autodiff.CHECK_FINITE = prev


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
