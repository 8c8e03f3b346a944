import warnings

import pytest
import torch

from ugnn.data import gen_blobs2d
from ugnn.model import build_mlp
from ugnn.training import TrainConfig, train

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def blobs_model():
    """2D MLP UGNN trained on separated blobs, shared by the slower tests."""
    train_set = gen_blobs2d(1000, seed=0)
    model = build_mlp([2, 2, 2], n_classes=2, activation="maxmin", head="updB")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train(model, train_set.X, train_set.y, TrainConfig(epochs=50, batch_size=64, margin=0.5, lr=1e-2))
    return model


@pytest.fixture(scope="session")
def blobs_test():
    return gen_blobs2d(1000, seed=1)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
