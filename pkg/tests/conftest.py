"""Shared pytest plumbing for the acceptance gate.

Acceptance tests record one ``[criterion N] PASS/FAIL: ...`` line each via
the ``criterion`` fixture; the hook below prints the collected lines after
the normal test summary so the verdicts survive output capturing.
"""

import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Callable that records a single acceptance-verdict line."""

    def record(line: str) -> None:
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
