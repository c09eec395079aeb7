import numpy as np
import pytest
import torch

from pairmotion.motion import chain_skeleton, default_skeleton


@pytest.fixture
def skeleton():
    return default_skeleton()


@pytest.fixture
def small_skeleton():
    return chain_skeleton(5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one summary line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
