"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n, title = mark.args
    prev = _RESULTS.get(n, (title, "PASS"))[1]
    if rep.failed:
        _RESULTS[n] = (title, "FAIL")
    elif rep.when == "call":
        _RESULTS[n] = (title, prev)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, verdict = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
