import math

import pytest

from ebsphere import diagnostics as dg
from ebsphere import ode_solver as od
from ebsphere import pde_solver as pde
from ebsphere.model import Divisor, ModelParams, lambda_critical
from ebsphere.sphere_grid import build_grid, higgs_data


@pytest.fixture(scope="session")
def p2():
    return ModelParams.compact(1.0, 2)


@pytest.fixture(scope="session")
def p4():
    return ModelParams.compact(1.0, 4)


@pytest.fixture(scope="session")
def grid32():
    return build_grid(32, 1.2)


@pytest.fixture(scope="session")
def grid64():
    return build_grid(64, 1.2)


@pytest.fixture(scope="session")
def grid128():
    return build_grid(128, 1.2)


@pytest.fixture(scope="session")
def profile_b1(p2):
    return od.shoot_compact(1.0, p2)


def symmetric_solution(grid, profile, params):
    D = Divisor.polystable_pair(params.half_N)
    hd = higgs_data(D, grid)
    guess = pde.ode_transfer_guess(profile, hd, params)
    return pde.newton_solve(guess, 2 * profile.lam, hd, params), guess


@pytest.fixture(scope="session")
def sym64(grid64, profile_b1, p2):
    return symmetric_solution(grid64, profile_b1, p2)


@pytest.fixture(scope="session")
def sym128(grid128, profile_b1, p2):
    return symmetric_solution(grid128, profile_b1, p2)


@pytest.fixture(scope="session")
def roots_branch_64(grid64, p4):
    """N=4 maximal branch at 64^2 on lam_c/{4,8}: cheap fixture for unit tests."""
    lc = lambda_critical(p4)
    return pde.maximal_branch([lc / 4, lc / 8], Divisor.roots_of_unity(4), grid64, p4)


@pytest.fixture(scope="session")
def roots_branch_128(grid128, p4):
    """N=4 maximal branch at 128^2 on lam_c/{4,8,16}, the range where solutions exist."""
    lc = lambda_critical(p4)
    return pde.maximal_branch([lc / 4, lc / 8, lc / 16], Divisor.roots_of_unity(4), grid128, p4)


@pytest.fixture(scope="session")
def cone128(grid128, p4):
    return dg.cone_metric(Divisor.roots_of_unity(4), p4, grid128)



# ------------------------------------------------------------------ acceptance ledger

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def _record(label, ok, detail=""):
        line = f"ACCEPTANCE {label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
