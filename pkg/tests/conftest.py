from pathlib import Path

import numpy as np
import pytest

from akid.tensor import Tensor

DATA_DIR = Path(__file__).parent / "data"
MNIST_SUBSET = DATA_DIR / "mnist_subset"
CONFIG_DIR = Path(__file__).parent.parent / "src" / "akid" / "configs"

# filled by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_batch():
    r = np.random.default_rng(1)
    return Tensor(r.normal(size=(4, 8, 8, 1)).astype(np.float32)), Tensor(np.array([0, 1, 2, 1]))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
