import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sinai_mme.billiard import build_table

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

REF = [((0.0, 0.0), 0.42), ((0.5, 0.5), 0.27)]
WIDE = [((0.0, 0.0), 0.38), ((0.5, 0.5), 0.18)]


@pytest.fixture(scope="session")
def ref_table():
    return build_table(REF)


@pytest.fixture(scope="session")
def wide_table():
    return build_table(WIDE)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
