import pytest

from odemerge.harness import ModelCache, StreamConfig

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def cache():
    return ModelCache()


@pytest.fixture(scope="session")
def default_cfg():
    return StreamConfig()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
