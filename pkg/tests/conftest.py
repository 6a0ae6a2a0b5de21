import numpy as np
import pytest

from larnn import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
