import copy
import json

import pytest

# a config small enough that every stage finishes in seconds
SMALL_CONFIG = {
    "seed": 3,
    "dim": 24,
    "generator": {"hidden": [16]},
    "fm": {"corpus": 300, "iterations": 60, "batch": 32},
    "data": {"n_sets": 48},
    "rm": {"iterations": 40, "batch": 16, "encoder": [8], "pooled": 4, "head": [8], "window": 1},
    "rl": {"iterations": 6, "batch": 2, "steps": 10, "ref_steps": 4},
    "eval": {"n_conditions": 6, "steps": 4},
}


@pytest.fixture
def small_config():
    return copy.deepcopy(SMALL_CONFIG)


@pytest.fixture
def small_config_file(tmp_path, small_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config))
    return path


# --------------------------------------------------------------------------
# acceptance bookkeeping: one pass/fail line per numbered criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and rep.when != "call":
        detail = f"{rep.when} error"
    _CRITERIA[number] = (title, rep.passed if rep.when == "call" else False, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
