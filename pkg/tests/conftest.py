import numpy as np
import pytest

from mrlong.discrete_law import load_fixture
from mrlong.trajectory import ProblemSpec, RegimeSpec


@pytest.fixture(scope="session")
def k1():
    return load_fixture("k1_basic")


@pytest.fixture(scope="session")
def k2():
    return load_fixture("k2_dropout")


@pytest.fixture(scope="session")
def k3():
    return load_fixture("k3_general")


def binary_spec(K, psi=None, regime=None):
    """Scalar blocks, binary treatments, static always-treat regime by default."""
    return ProblemSpec(K, [[0, 1]] * K, [1] * (K + 1), psi or f"L{K + 1}",
                       regime or RegimeSpec.static([1] * K))


def columns(*cols):
    return [np.asarray(c, dtype=float).reshape(-1, 1) for c in cols]


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
