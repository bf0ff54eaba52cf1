import numpy as np
import pytest
from hypothesis import settings

from solver_forge import problems
from solver_forge.schedules import DIT_SCHEDULE

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def gmm_rf():
    return problems.make_field("gmm2d", "rf")


@pytest.fixture
def gmm_vp():
    return problems.make_field("gmm2d", "vp")


@pytest.fixture
def gauss_vp():
    return problems.make_field("gaussian", "vp")


@pytest.fixture
def x0_small():
    return np.random.default_rng(7).standard_normal((16, 2))


@pytest.fixture
def dit():
    return DIT_SCHEDULE


# one summary line per acceptance criterion, with the measured numbers
_CRITERIA = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA.append((report.nodeid.split("::")[-1], report.outcome.upper(), detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _CRITERIA:
        terminalreporter.write_line(f"{name:<44} {outcome:<7} {detail}")
