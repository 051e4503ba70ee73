import numpy as np
import pytest
import torch

from pamir.body import desk_model
from pamir.testmodels import two_bone_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def model():
    return desk_model()


@pytest.fixture(scope="session")
def bone_model():
    return two_bone_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, line

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(line(n))
