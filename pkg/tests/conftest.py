import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tabf.checks import synthetic_store
from tabf.domain import Periodic, Reflected
from tabf.gridfn import Grid1D

settings.register_profile(
    "tabf", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("tabf")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pgrid():
    return Grid1D(12, Periodic(2 * math.pi))


@pytest.fixture
def rgrid():
    return Grid1D(9, Reflected(-0.2, 1.2))


@pytest.fixture
def store2():
    return synthetic_store(2, 600, seed=4)


@pytest.fixture
def store3():
    return synthetic_store(3, 500, seed=5)


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
