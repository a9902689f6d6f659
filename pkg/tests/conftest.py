import sys

import pytest

from patchkeeper.core import PhysioProfile, SensorConfig
from patchkeeper.simulator import generate_session


@pytest.fixture(scope="session")
def session_20s():
    """Default 20 s session, seed 7."""
    return generate_session(PhysioProfile(), 20.0, SensorConfig(), seed=7)


@pytest.fixture(scope="session")
def session_60s():
    return generate_session(PhysioProfile(), 60.0, SensorConfig(), seed=1)


@pytest.fixture(scope="session")
def saved_10s(tmp_path_factory):
    log, truth = generate_session(PhysioProfile(), 10.0, SensorConfig(), seed=3)
    out = tmp_path_factory.mktemp("s10")
    paths = log.save(out)
    return log, truth, paths



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
