import math

import numpy as np
import pytest

from polyscatter.geometry import ConvexPolygon

TRIANGLE = [(1.0, 0.0), (2.5, -0.5), (2.5, 1.0)]
HEXAGON = [(4.0, 2.5), (3.0, 3.0), (1.0, 2.0), (0.5, 0.0), (2.0, -1.0), (4.5, -0.5)]
UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def d_j(j):
    return np.array([math.cos(j * math.pi / 4), math.sin(j * math.pi / 4)])


@pytest.fixture
def triangle():
    return ConvexPolygon(TRIANGLE)


@pytest.fixture
def hexagon():
    return ConvexPolygon(HEXAGON)


@pytest.fixture
def square():
    return ConvexPolygon(UNIT_SQUARE)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
