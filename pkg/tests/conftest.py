import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    """Record a one-line verdict that is echoed in the terminal summary."""

    def record(line: str) -> None:
        print(line)
        _ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
