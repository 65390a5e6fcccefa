import pytest

_RESULTS: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    _, failures = _RESULTS.setdefault(number, (title, []))
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        failures.append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, failures = _RESULTS[number]
        status = "PASS" if not failures else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}")
