import os
from pathlib import Path

import pytest

from artifact.acceptance import run_sweep
from artifact.config import RunConfig

CACHE_ENV = "ARTIFACT_TEST_CACHE"
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_config():
    return RunConfig.load()


@pytest.fixture(scope="session")
def sweep_out():
    out = Path(os.environ.get(CACHE_ENV, Path(__file__).resolve().parents[1] / ".acceptance-cache"))
    out.mkdir(parents=True, exist_ok=True)
    return out


@pytest.fixture(scope="session")
def sweep(default_config, sweep_out):
    """Default three-epsilon sweep; results are cached on disk between sessions."""
    results, seconds = run_sweep(default_config, sweep_out)
    return results, seconds


@pytest.fixture
def report_check():
    def record(check):
        line = check.line()
        print(line)
        ACCEPTANCE_LINES.append(line)
        return check

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][2:].rstrip(":"))):
            terminalreporter.write_line(line)
