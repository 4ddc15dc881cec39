import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

HITTERS = HERE / "data" / "Hitters.csv"


@pytest.fixture
def hitters_path():
    return HITTERS


ACCEPTANCE = []


def record(criterion, passed, detail):
    """Store one acceptance line; printed at the end of the session."""
    line = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append((criterion, line))
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
