import numpy as np
import pytest

from fpesc.fields import QuadraticPotential, oracle_field
from fpesc.oracle import evolve_gaussian
from fpesc.selfcons import GaussianInitial
from helpers import MU0, MU_INF, SIGMA0, SIGMA_INF


@pytest.fixture(scope="session")
def pot():
    return QuadraticPotential(MU_INF, SIGMA_INF)


@pytest.fixture(scope="session")
def init():
    return GaussianInitial(MU0, SIGMA0)


@pytest.fixture(scope="session")
def path_fine():
    """Path with stamps every 5e-4, enough for RK4 at dt = 1e-3."""
    return evolve_gaussian(MU0, SIGMA0, MU_INF, SIGMA_INF, 3.0, 5e-4)


@pytest.fixture(scope="session")
def path_coarse():
    """Path with stamps every 5e-3, enough for RK4 at dt = 1e-2."""
    return evolve_gaussian(MU0, SIGMA0, MU_INF, SIGMA_INF, 3.0, 5e-3)


@pytest.fixture(scope="session")
def oracle_fine(path_fine, pot):
    return oracle_field(path_fine, pot)


@pytest.fixture(scope="session")
def oracle_coarse(path_coarse, pot):
    return oracle_field(path_coarse, pot)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, name, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
