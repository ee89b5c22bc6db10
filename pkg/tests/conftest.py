"""One summary line per acceptance criterion."""

_acceptance = {}


def pytest_collection_modifyitems(items):
    # label at collection time so a failing fixture is still reported
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
            item.user_properties.append(("title", mark.args[1]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _acceptance.setdefault(report.nodeid, {"outcome": "passed"})
    entry["props"] = props
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and entry["outcome"] == "passed":
        entry["outcome"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_acceptance.values(), key=lambda e: e["props"]["criterion"]):
        word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[entry["outcome"]]
        p = entry["props"]
        terminalreporter.write_line(f"{word} [{p['criterion']}] {p['title']}: {p.get('detail', '-')}")
