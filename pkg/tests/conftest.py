import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trafficft.data import smoke_suite
from trafficft.trainer import pretrain_bc

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def smoke():
    return smoke_suite()


@pytest.fixture(scope="session")
def bc_params(smoke):
    return pretrain_bc(smoke, steps=300).params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
