import re

VERDICTS: list[tuple[int, str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or report.when != "call" and not report.failed:
        return
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    VERDICTS.append((int(m.group(1)), m.group(2).replace("_", " "), status, detail))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, status, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"{status} criterion {n:2d} {name}" + (f": {detail}" if detail else ""))
