"""Collects ``criterion`` properties and prints one pass/fail line per acceptance criterion."""

_lines: dict[str, list] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _lines.setdefault(report.nodeid, [props["criterion"], props.get("detail", ""), True])
    if report.failed:
        entry[2] = False
    if "detail" in props:
        entry[1] = props["detail"]


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, detail, ok in sorted(_lines.values(), key=lambda e: e[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
