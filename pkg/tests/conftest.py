import pathlib

import pytest

import acceptance_log
from queryclf.trainer import TrainConfig

ROOT = pathlib.Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def desk_config() -> TrainConfig:
    return TrainConfig.from_file(ROOT / "configs" / "desk.cfg")


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
