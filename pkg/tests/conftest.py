import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def cache_dir():
    path = os.environ.get("MAGPOSE_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "magpose"))
    os.makedirs(path, exist_ok=True)
    return path


# one PASS/FAIL line per acceptance criterion, printed at the end of the session
_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    entry = _criteria.setdefault(number, {"ok": True, "notes": []})
    entry["ok"] &= report.outcome == "passed"
    detail = dict(report.user_properties).get("detail")
    if detail:
        entry["notes"].append(detail)
    elif report.outcome != "passed":
        entry["notes"].append(f"{report.nodeid.split('::')[-1]} {report.outcome}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  " + "; ".join(entry["notes"]))


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args[0]))
