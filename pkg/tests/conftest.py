import time

import numpy as np
import pytest

from instastyle.core import Rng
from instastyle.pipeline import Context, PipelineConfig, pretrain_model
from instastyle.sched import sd_schedule


@pytest.fixture(scope="session")
def sd1000():
    return sd_schedule(1000)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def ctx():
    return Context.build(PipelineConfig())


class Pretrained:
    def __init__(self, model, seconds, history):
        self.model, self.seconds, self.history = model, seconds, history


@pytest.fixture(scope="session")
def pretrained(ctx):
    """Default-config backbone, trained once per session; ``seconds`` is its wall time."""
    history = []
    t0 = time.perf_counter()
    model = pretrain_model(ctx, history)
    return Pretrained(model, time.perf_counter() - t0, history)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  [{detail}]")
