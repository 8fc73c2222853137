import time

import pytest

_results: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        number, title = marker.args
        passed = outcome.excinfo is None
        _results[number] = ("PASS" if passed else "FAIL", title, time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, elapsed = _results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({elapsed:.2f} s)")
