import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Record one status line per acceptance criterion."""

    def log(label, status, detail):
        line = f"criterion {label:>4}: {status:<4}  {detail}"
        _LINES.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
