import numpy as np
import pytest
import torch

from jcdp.denoiser import DenoiserSpec, train_ddpm
from jcdp.perceptual import train_extractor
from jcdp.schedule import desk_schedule
from jcdp.toydata import make_benchmark


@pytest.fixture(scope="session")
def small_bench():
    return make_benchmark(0, n_train=96, n_test=48, n_surrogate=64)


@pytest.fixture(scope="session")
def tiny_spec():
    return DenoiserSpec(base_width=8, time_embedding_dim=16)


@pytest.fixture(scope="session")
def tiny_state(small_bench, tiny_spec):
    return train_ddpm(small_bench["surrogate"], tiny_spec, desk_schedule(20), steps=30,
                      batch_size=16, seed=0, lr=1e-3, log_every=5)


@pytest.fixture(scope="session")
def tiny_phi(small_bench):
    return train_extractor(small_bench["surrogate"], steps=20, seed=0, width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# acceptance reporting: tests marked ``criterion(number, title)`` get one
# PASS/FAIL line each in the terminal summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        if rep.skipped:
            status = "SKIP"
        else:
            status = "PASS" if rep.passed else "FAIL"
        _CRITERIA[number] = {"title": title, "status": status, "detail": detail}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        c = _CRITERIA[number]
        line = f"criterion {number:2d} {c['status']}: {c['title']}"
        if c["detail"]:
            line += f" [{c['detail']}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    """One workbench for every desk-scale test, so shared stages run once."""
    from jcdp.harness import Workbench

    return Workbench()
