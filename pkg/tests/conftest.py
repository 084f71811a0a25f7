import pytest

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (passed, detail)
    status = {True: "PASS", False: "FAIL", None: "N/A"}[passed]
    print(f"{criterion} {status}: {detail}")
    return passed


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        passed, detail = ACCEPTANCE[key]
        status = {True: "PASS", False: "FAIL", None: "N/A "}[passed]
        terminalreporter.write_line(f"{key:<4} {status}  {detail}")
