"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def note(request):
    """Attach a measured quantity to the criterion line of the running test."""
    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        notes = "; ".join(v for k, v in item.user_properties if k == "note")
        line = f"criterion {number:>2} {status}  {title}"
        _LINES[number] = line + (f"  [{notes}]" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
