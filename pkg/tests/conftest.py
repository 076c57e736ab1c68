import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
