"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[int, dict]" = OrderedDict()


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    n, title = mark.args
    return _RESULTS.setdefault(n, dict(title=title, ok=True, ran=False, details=[]))


@pytest.fixture
def record(request):
    """``record(text)`` attaches a detail to this test's criterion line."""
    entry = _entry(request.node)

    def add(text):
        if entry is not None:
            entry["details"].append(str(text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["ran"] = True
        if rep.failed:
            entry["ok"] = False
        if rep.skipped:
            entry["ok"] = None if entry["ok"] is not False else False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        if not e["ran"]:
            status = "NOT RUN"
        elif e["ok"] is None:
            status = "SKIP"
        else:
            status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {e['title']}" + (f" | {detail}" if detail else ""))
