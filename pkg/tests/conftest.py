import pytest

_ACCEPTANCE: dict = {}
_OPTIONAL = {11: "needs converted external scene records (BEAMTRACK_RAYMOBTIME)"}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    for number, why in _OPTIONAL.items():
        if number not in _ACCEPTANCE:
            terminalreporter.write_line(f"criterion {number:>2}: SKIP  {why}")
