import pytest

_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """``report(n, passed, detail)`` records the summary line for criterion ``n``."""

    def report(n: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(_ACCEPTANCE_LINES[n])

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[n])
