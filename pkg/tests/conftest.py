import pytest

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}"
    CRITERIA[number] = line
    return line


@pytest.fixture
def criterion(capsys):
    def emit(number: int, passed: bool, detail: str) -> None:
        line = record_criterion(number, passed, detail)
        with capsys.disabled():
            print("\n" + line, flush=True)

    return emit


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
