import numpy as np
import pytest

from mfcontrol.model import ControlPolicy, builtin_model
from mfcontrol.paths import EMPTY_LEVY, LevyMeasure, TimeGrid, generate_ensemble

ONE_MARK = LevyMeasure(marks=((-0.5, 0.3),))
TWO_MARKS = LevyMeasure(marks=((-0.5, 0.3), (0.8, 0.2)))

PLAIN_PARAMS = dict(A=0.1, B=1.0, C=0.2, D=0.1, Fz=(0.1,), Gz=(0.05,),
                   L=1.0, M=0.0, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
MEANFIELD_PARAMS = dict(A=0.1, C=1.0, D=0.2, F=0.1, S=(0.1,), I=(0.05,),
                   L=1.0, O=1.0, M=0.0, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)


@pytest.fixture(scope="session")
def grid20():
    return TimeGrid(T=1.0, N=20)


@pytest.fixture(scope="session")
def noise20(grid20):
    return generate_ensemble(grid20, ONE_MARK, n_paths=4000, seed=101)


@pytest.fixture(scope="session")
def grid12():
    return TimeGrid(T=1.0, N=12)


@pytest.fixture(scope="session")
def noise12(grid12):
    return generate_ensemble(grid12, ONE_MARK, n_paths=3000, seed=103)


@pytest.fixture(scope="session")
def plain_model():
    return builtin_model("lq_plain", PLAIN_PARAMS, levy=ONE_MARK)


@pytest.fixture(scope="session")
def meanfield_model():
    return builtin_model("lq_meanfield", MEANFIELD_PARAMS, levy=ONE_MARK)


@pytest.fixture(scope="session")
def nonlinear_model():
    return builtin_model("bounded_nonlinear", levy=ONE_MARK)


def constant_policy(grid, value):
    return ControlPolicy.constant(value, grid)
