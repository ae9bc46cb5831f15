import re

import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the outcome line of an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS[number] = line
        print(line)
        return ok

    return report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.search(r"test_criterion_(\d+)", item.name)
    if m and rep.when == "call" and rep.failed:
        n = int(m.group(1))
        if n not in _RESULTS or "PASS" in _RESULTS[n]:
            msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
            _RESULTS[n] = f"criterion {n:2d}: FAIL  {msg}"


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
