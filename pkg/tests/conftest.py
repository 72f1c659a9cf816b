import pytest

# (label, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(label, passed, detail=""):
        # passed=None marks a criterion that was not exercised
        ACCEPTANCE.append((label, None if passed is None else bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
