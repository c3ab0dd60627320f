import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedprune.data import Dataset
from fedprune.nn import Conv2D, Dense, Flatten, MaxPool2D, ModelSpec, ReLU, SoftmaxCrossEntropyHead, mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return mlp(4, [6, 5], 3)


@pytest.fixture
def small_cnn():
    return ModelSpec(
        (2, 6, 6),
        (
            Conv2D(2, 4, 3, 3, padding=1), ReLU(), MaxPool2D(),
            Conv2D(4, 6, 3, 3), ReLU(),
            Flatten(), Dense(6, 5), ReLU(),
            Dense(5, 3), SoftmaxCrossEntropyHead(3),
        ),
    )


def make_dataset(rng, spec, n):
    return Dataset(rng.normal(size=(n, *spec.input_shape)), rng.integers(0, spec.classes, size=n), spec.classes)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.LOG:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.LOG, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
