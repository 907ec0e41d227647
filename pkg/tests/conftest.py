import os

import pytest
from hypothesis import HealthCheck, settings

# every property runs 1000 randomized cases unless overridden
settings.register_profile(
    "acceptance",
    max_examples=1000,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("quick", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("ELASTIQ_HYPOTHESIS_PROFILE", "acceptance"))


# -- acceptance report ------------------------------------------------------------

_criteria = {}
_properties = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def is_property(item):
    fn = getattr(item, "obj", None)
    return bool(getattr(fn, "is_hypothesis_test", False))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            detail = "; ".join(v for k, v in item.user_properties if k == "detail")
            _criteria[mark.args[0]] = (mark.args[1], rep.passed, detail)
        elif is_property(item):
            _properties[item.nodeid] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        title, passed, detail = _criteria[n]
        if n == 9 and _properties:
            failed = [k for k, ok in _properties.items() if not ok]
            passed = passed and not failed
            detail = f"{len(_properties) - len(failed)} of {len(_properties)} property tests passed in this session"
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}"
        tr.write_line(line + (f"  [{detail}]" if detail else ""))
