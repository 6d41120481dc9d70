import pytest

_LINES = {}


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number, passed, detail):
        _LINES[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        print(_LINES[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
