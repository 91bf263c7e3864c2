import time

import numpy as np
import pytest

from cat_backbone.config import preset
from cat_backbone.train import train_toy

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run():
    """The 200-step toy training run, shared by the training and acceptance tests."""
    start = time.perf_counter()
    result = train_toy(preset("toy"), steps=200, seed=0)
    result.seconds = time.perf_counter() - start
    return result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
