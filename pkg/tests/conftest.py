import re

import pytest

N_CRITERIA = 10
_RESULTS = pytest.StashKey[dict]()
_OUTCOMES = pytest.StashKey[dict]()
_NAME = re.compile(r"test_criterion_(\d+)_")


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.stash[_OUTCOMES] = {}


@pytest.fixture
def record(request, capsys):
    """Log one pass/fail line for an acceptance criterion."""
    results = request.config.stash[_RESULTS]

    def _record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[number] = line
        with capsys.disabled():
            print("\n" + line)

    return _record


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    m = _NAME.search(item.nodeid)
    if m and call.excinfo is not None and call.when in ("setup", "call"):
        item.config.stash[_OUTCOMES][int(m.group(1))] = "failed"


def pytest_terminal_summary(terminalreporter, config):
    results, outcomes = config.stash.get(_RESULTS, {}), config.stash.get(_OUTCOMES, {})
    if not results and not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            line = results[n]
        elif outcomes.get(n) == "failed":
            line = f"criterion {n:2d}: FAIL  raised before reporting"
        else:
            line = f"criterion {n:2d}: not run"
        terminalreporter.write_line(line)
