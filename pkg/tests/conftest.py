import numpy as np
import pytest

from atlascrop.atlas import atlas_from_labels
from atlascrop.phantom import canonical_phantom


@pytest.fixture(scope="session")
def phantom():
    return canonical_phantom()


@pytest.fixture(scope="session")
def atlas(phantom):
    return atlas_from_labels(phantom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    def log(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
