import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if not marker:
        return
    number, title = marker
    detail = dict(report.user_properties).get("detail", "")
    _results[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, detail = _results[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f": {detail}" if detail else ""))


@pytest.fixture(autouse=True)
def _criterion_property(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker:
        record_property("criterion", tuple(marker.args))
