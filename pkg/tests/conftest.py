"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import defaultdict

import pytest

_outcomes: dict[int, list[tuple[str, str, list]]] = defaultdict(list)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    measured = [(k, v) for k, v in report.user_properties if k != "criterion"]
    _outcomes[n].append((report.nodeid.split("::")[-1], report.outcome, measured))


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        runs = _outcomes[n]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        detail = "; ".join(f"{k}={v}" for _, _, m in runs for k, v in m)
        names = ", ".join(name for name, _, _ in runs)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  [{names}]" + (f"  {detail}" if detail else ""))
