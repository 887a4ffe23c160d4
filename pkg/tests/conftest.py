"""Shared fixtures; collects the acceptance verdicts for the terminal summary."""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, ok, detail):
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
