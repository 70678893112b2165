"""Shared pytest hooks.

Acceptance tests register one verdict line each; the lines are repeated in
the terminal summary so they stay visible when output is captured.
"""

import pytest

VERDICTS = []


def record_verdict(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append((number, line))
    print(line)


@pytest.fixture()
def verdict():
    """Record the outcome of one acceptance criterion, then assert it."""

    def _verdict(number: int, passed: bool, detail: str):
        record_verdict(number, bool(passed), detail)
        assert passed, f"criterion {number} failed: {detail}"

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
