"""Per-criterion summary for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped; after the run
one PASS/FAIL line is printed per criterion together with any values the
tests attached through ``record_property``.
"""
from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[int, dict]" = OrderedDict()


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _RESULTS.setdefault(n, {"title": title, "outcomes": [], "notes": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            n = value
            break
    else:
        return
    entry = _RESULTS[n]
    entry["outcomes"].append("xfailed" if hasattr(report, "wasxfail") else report.outcome)
    entry["notes"].extend(v for k, v in report.user_properties if k == "measured")


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", m.args[0])


def pytest_terminal_summary(terminalreporter):
    ran = {n: e for n, e in _RESULTS.items() if e["outcomes"]}
    if not ran:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ran):
        e = ran[n]
        ok = all(o == "passed" for o in e["outcomes"])
        verdict = "PASS" if ok else "FAIL"
        if "xfailed" in e["outcomes"]:
            verdict += " (known, see the decisions ledger)"
        tr.write_line(f"criterion {n}: {verdict}  {e['title']}  "
                      f"({e['outcomes'].count('passed')}/{len(e['outcomes'])} checks)")
        for note in e["notes"]:
            tr.write_line(f"    {note}")
