import pytest

_LINES = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return the flag."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}"
        _LINES[number] = line
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
