import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion n; summarised at the end of the run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    if rep.when != "call" and status == "FAIL":
        detail = f"error during {rep.when}"
    _ACCEPTANCE[mark.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
