import math
import warnings

import numpy as np
import pytest

from hybridyn.dynamics import MeasurementModel
from hybridyn.phase_space import PhaseSpaceGrid
from hybridyn.polynomial import Polynomial
from hybridyn.quantum import MeasuredBasisModel

HARMONIC = [0, 0, 0, 0.5, 0, 0.5]
LINEAR_Q = [0, 1]


def make_model(h=(1.0, 1.0), v=(1.0, -1.0), c0=None, H=HARMONIC, V=LINEAR_Q, hbar=1.0,
               t0=0.0, q0=1.0, p0=0.0) -> MeasurementModel:
    if c0 is None:
        c0 = np.full(len(h), 1 / math.sqrt(len(h)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return MeasurementModel(MeasuredBasisModel(h, v, c0), Polynomial.from_coefficients(H),
                                Polynomial.from_coefficients(V), hbar, t0, q0, p0)


@pytest.fixture
def golden():
    return make_model()


@pytest.fixture
def golden_grid():
    return PhaseSpaceGrid(-6, 6, 64, -6, 6, 64)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
