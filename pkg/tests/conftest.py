import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line; the lines are repeated in the terminal summary."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _VERDICTS.append(line)
        print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
