import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    number, title = marker.args
    previous = _RESULTS.get(number, (title, "PASS"))[1]
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP" if previous == "PASS" else previous
    else:
        status = previous
    if report.when == "call" or report.failed or report.skipped:
        _RESULTS[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status = _RESULTS[number]
        terminalreporter.write_line(f"AC{number:02d} {status}  {title}")
