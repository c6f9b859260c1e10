import pytest

# filled by test_acceptance.py; one (criterion, passed, detail) per acceptance check
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
