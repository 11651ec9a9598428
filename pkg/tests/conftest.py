import numpy as np
import pytest

from obsv.system import InputSignal, SimulatedOutput, TriangularSpec, build_triangular

PLANAR = TriangularSpec(2, 1, ("u1",), ("0", "x1 - x2^3"))
SATURATED = TriangularSpec(2, 1, ("u1",), ("0", "y - sat(x2)^3"))
CHAIN2 = TriangularSpec(2, 0, ("1",), ("0", "0"))
X0 = np.array([2.0, 0.0])


@pytest.fixture(scope="session")
def planar():
    return build_triangular(PLANAR)


@pytest.fixture(scope="session")
def saturated():
    return build_triangular(SATURATED)


@pytest.fixture(scope="session")
def chain2():
    return build_triangular(CHAIN2)


@pytest.fixture(scope="session")
def unit_input():
    return InputSignal.constant(1.0)


@pytest.fixture(scope="session")
def no_input():
    return InputSignal(())


@pytest.fixture
def planar_output(planar, unit_input):
    return SimulatedOutput(planar, X0, unit_input)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
