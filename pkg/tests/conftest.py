"""Collects one line per acceptance criterion and prints them after the run."""

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_A" not in report.nodeid:
        return
    name = report.nodeid.split("::test_")[-1]
    code = name.split("_")[0]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE[code] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        status, detail = _ACCEPTANCE[code]
        terminalreporter.write_line(f"{code:<4} {status}  {detail}")
