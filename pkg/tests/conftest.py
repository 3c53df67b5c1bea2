import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bitkv import kernels
from bitkv.core import as_fp16_values

settings.register_profile("bitkv", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bitkv")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per kernel backend."""
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fp16_normal(rng, shape, scale=1.0):
    return as_fp16_values(rng.standard_normal(shape) * scale)


# --- acceptance summary: one line per numbered criterion ---

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] &= rep.passed
    detail = dict(item.user_properties).get("detail")
    if detail:
        entry["details"].append(detail)
    elif rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] else "FAIL"
        line = f"{status} [{number:2d}] {e['title']}"
        if e["details"]:
            line += " :: " + "; ".join(e["details"])
        terminalreporter.write_line(line)
