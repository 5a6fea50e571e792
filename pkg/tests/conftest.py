import os
import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")
    config._acceptance = {}
    config._t0 = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    # the suite-level criterion (runtime, nothing failed before it) goes last
    def last(item):
        mark = item.get_closest_marker("acceptance")
        return bool(mark and mark.kwargs.get("suite"))

    items.sort(key=last)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if not rep.passed and not detail:
            detail = rep.longreprtext.strip().splitlines()[-1][:160] if rep.longreprtext else ""
        item.config._acceptance[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else ""))
