import pytest

_RESULTS = pytest.StashKey[dict]()
CRITERIA = range(1, 11)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion: ``criterion(n, title, ok, detail)``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        results[number] = f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(results[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        missing = f"criterion {n:2d}  ----  not run (deselected or errored before recording)"
        terminalreporter.write_line(results.get(n, missing))
