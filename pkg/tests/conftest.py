import pytest

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def record_criterion():
    """``record(label, ok, detail)`` appends one line to the acceptance summary."""

    def record(label, ok, detail=""):
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
