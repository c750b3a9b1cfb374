import numpy as np
import pytest

from dipole_grid import statespace as ss
from dipole_grid.forward import ForwardModel
from dipole_grid.geometry import HeadModel, RoiBox, discretize, place_sensors


@pytest.fixture
def head():
    return HeadModel(np.zeros(3), 10.0)


@pytest.fixture
def small_setup(head):
    """12 sensors, Case 1 dynamics, a 3x3x3 grid around the source."""
    sensors = place_sensors(head, 12, seed=3)
    fwd = ForwardModel(sensors)
    params = ss.case1_params(12)
    grid = discretize(RoiBox(((-4.0, 2.0), (-2.0, 4.0), (3.0, 7.0))), (3, 3, 3))
    return sensors, fwd, params, grid


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Collects one summary line per acceptance criterion."""
    def report(number, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
