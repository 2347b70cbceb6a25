"""Shared pytest wiring: acceptance criteria report one PASS/FAIL line each."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        previous = _RESULTS.get(number)
        if previous is None or previous[1] == "PASS":
            _RESULTS[number] = (title, "FAIL" if failed else "PASS", details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, details = _RESULTS[number]
        line = f"criterion {number}: {status}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
