import sys

import numpy as np
import pytest

from letf_lab.heston import CarryTerms, HestonParams
from letf_lab.market_data import FundSpec

DESK = HestonParams(kappa=2.0, theta=0.04, sigma=0.3, v0=0.04, rho=-0.5)


@pytest.fixture
def desk_params():
    return DESK


@pytest.fixture
def zero_carry():
    return CarryTerms(0.0, 0.0)


@pytest.fixture
def funds():
    spy = FundSpec("SPY", 1.0, 0.0009, 0.0)
    sso = FundSpec("SSO", 2.0, 0.0090, 0.0044)
    return {"SPY": spy, "SSO": sso}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
