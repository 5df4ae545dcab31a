import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = (ok, detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
