import numpy as np
import pytest

from onebit_rof.config import SystemConfig
from onebit_rof.model_core import build_measurement_matrix


@pytest.fixture(scope="session")
def cfg():
    return SystemConfig()


@pytest.fixture(scope="session")
def op(cfg):
    return build_measurement_matrix(cfg)


@pytest.fixture(scope="session")
def small_cfg():
    # N=32, S=3, Np=4: cheap but keeps the oversampled structure
    return SystemConfig(N=32, S=3, Np=4, L=3)


@pytest.fixture(scope="session")
def small_op(small_cfg):
    return build_measurement_matrix(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
