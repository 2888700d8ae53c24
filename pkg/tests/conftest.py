import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the end-of-run summary."""

    def record(number, ok, detail):
        _LINES.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)
