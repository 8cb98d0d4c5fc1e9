import pytest

ACCEPTANCE_LINES = {}


def record(key, passed, detail):
    """Store one acceptance line; the session summary prints them in order.

    ``passed=None`` marks a check that was not run.
    """
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"[{status}] {key}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
