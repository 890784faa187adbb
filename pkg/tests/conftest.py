import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion(capsys):
    """``criterion(n, title, ok, detail)`` records and prints one result line."""

    def record(n, title, ok, detail=""):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
