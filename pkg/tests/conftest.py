"""Per-criterion PASS/FAIL summary for tests marked ``acceptance(criterion=N, name=...)``."""

import os

import pytest

os.environ.setdefault("ICL_DATA_DIR", "/root/data")

_results = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    key = marker
    entry = _results.setdefault(key, {"outcomes": [], "details": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcomes"].append(report.outcome)
        for name, text in report.user_properties:
            if name == "measured":
                entry["details"].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        report._acceptance = (marker.kwargs["criterion"], marker.kwargs["name"])


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), entry in sorted(_results.items()):
        outcomes = entry["outcomes"]
        if outcomes and all(o == "skipped" for o in outcomes):
            status = "SKIP"
        elif outcomes and all(o in ("passed", "skipped") for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        line = f"criterion {num}: {status}  {name}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
