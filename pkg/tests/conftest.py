"""Shared test plumbing: acceptance pass/fail lines in the terminal summary."""

_ACCEPTANCE_LINES: list[str] = []

import pytest


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion and assert it."""

    def note(criterion: str, ok: bool, detail: str = "") -> None:
        line = f"{criterion}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return note


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
