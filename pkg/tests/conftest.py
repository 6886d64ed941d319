import pytest

_RESULTS = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records and prints one criterion verdict."""
    def record(n, ok, detail):
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}"
        _RESULTS[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[n])
