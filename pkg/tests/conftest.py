"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        detail = dict(item.user_properties).get("detail", "")
        _LINES[number] = f"{status} [{number:2d}] {title}" + (f": {detail}" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
