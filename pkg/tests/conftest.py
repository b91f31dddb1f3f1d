"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """``criterion(number, ok, detail)`` records and prints a verdict line."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
