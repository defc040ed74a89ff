import numpy as np
import pytest

from gsattack import zoo
from gsattack.model import init_params


@pytest.fixture(scope="session")
def dataset():
    return zoo.dataset(0)


@pytest.fixture(scope="session")
def victim():
    return zoo.victim(0)


@pytest.fixture(scope="session")
def substitute_run():
    return zoo.substitute(0)


@pytest.fixture(scope="session")
def substitute(substitute_run):
    return substitute_run[0]


@pytest.fixture(scope="session")
def tiny_params():
    # 12x12 inputs keep finite-difference loops cheap
    return init_params(7, input_shape=(12, 12, 3), num_classes=4, widths=(3, 4), hidden=8, embed_dim=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
