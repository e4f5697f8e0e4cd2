import numpy as np
import pytest

from masn import autodiff as ad


def store_from(**arrays) -> ad.ParamStore:
    store = ad.ParamStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
