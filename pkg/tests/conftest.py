import numpy as np
import pytest
import torch

from wifipose.csi_data import synth_generate


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_generate(num_sequences=4, frames_per_sequence=12, S=16, T=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# -- acceptance summary: one pass/fail line per criterion ------------------------------

_ACCEPTANCE_PREFIX = "test_acceptance.py::test_criterion_"
_RESULTS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if _ACCEPTANCE_PREFIX not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number = int(report.nodeid.split(_ACCEPTANCE_PREFIX)[1].split("_")[0])
        detail = dict(report.user_properties).get("detail", "")
        status = "PASS" if report.passed else "FAIL"
        _RESULTS[number] = f"criterion {number}: {status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[number])
