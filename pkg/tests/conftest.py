"""Shared fixtures: the calibrated plant chain is expensive enough to build
once per session, and several test modules consume its stages."""

import os

import numpy as np
import pytest

from roskit.plant import (PlantParameters, SfrParameters, OperatingCondition,
                          calibrate, solve_equilibrium, linearize,
                          kron_reduce, sma_reduce)


def accept_degree(default: int = 6) -> int:
    """Degree used for the expensive region-of-safety runs; override with
    ROSKIT_ACCEPT_DEGREE=8 for the full-accuracy suite."""
    return int(os.environ.get("ROSKIT_ACCEPT_DEGREE", default))


@pytest.fixture(scope="session")
def params():
    return calibrate(PlantParameters())


@pytest.fixture(scope="session")
def sfr():
    return SfrParameters()


@pytest.fixture(scope="session")
def cond():
    return OperatingCondition()


@pytest.fixture(scope="session")
def equilibrium(params):
    state, alg = solve_equilibrium(params)
    return state, alg


@pytest.fixture(scope="session")
def lin(params, equilibrium):
    state, alg = equilibrium
    return linearize(params, state, alg)


@pytest.fixture(scope="session")
def ss(lin):
    return kron_reduce(lin)


@pytest.fixture(scope="session")
def red(ss):
    return sma_reduce(ss)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
