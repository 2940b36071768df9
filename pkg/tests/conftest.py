import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("mhgd", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mhgd")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = """
[run]
seeds = 0,1
methods = student,mhgd

[dataset]
train_count = 256
test_count = 128

[mhgd]
heads = 2
d_att = 16
d1 = 16

[train_teacher]
epochs = 2

[train_mhan]
epochs = 2
lr = 0.1

[train_student]
epochs = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return path


# -- acceptance reporting ---------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    number, name = marker.args
    detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if report.passed else "FAIL"
    line = f"criterion {number}: {status}  {name}" + (f"  [{detail}]" if detail else "")
    if _CRITERIA.get(number, "").startswith(f"criterion {number}: FAIL"):
        return
    _CRITERIA[number] = line


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
