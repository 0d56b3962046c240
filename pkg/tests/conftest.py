"""Shared test plumbing: the acceptance-criterion result board."""

from __future__ import annotations

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    """Log one acceptance criterion outcome (echoed in the terminal summary)."""
    status = "PASS" if passed else "FAIL"
    line = f"{status} criterion {number}: {title}"
    if detail:
        line += f" [{detail}]"
    _ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
