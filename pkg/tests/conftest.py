import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from condgen import tensor as T

from helpers import ACCEPTANCE_LINES


@pytest.fixture(autouse=True)
def clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
