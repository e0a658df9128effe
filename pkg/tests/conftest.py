import numpy as np
import pytest
import torch

from madm.train import TrainConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TrainConfig.desk("edge", resolution=32, iterations=4, ae_steps=0, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture
def tiny_model64():
    cfg = TrainConfig.desk("edge", resolution=64, ae_steps=0, seed=5)
    return build_model(cfg, dtype=torch.float64)


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, title = mark.args
    prev = _CRITERIA.get(number)
    status = "PASS" if report.passed else "FAIL"
    if prev is not None and prev[1] == "FAIL":
        status = "FAIL"
    _CRITERIA[number] = (title, status, report.duration + (prev[2] if prev else 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  ({seconds:.1f} s)")
