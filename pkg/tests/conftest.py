import pytest

from approxcnn.datasets import gen_synthetic_dataset, split_dataset
from approxcnn.engine import build_network
from approxcnn.trainer import TrainConfig, train


def train_tiny(seed: int):
    """appsign-tiny trained on the 8-class glyph set; returns (net, train, test)."""
    ds = gen_synthetic_dataset(classes=8, per_class=50, size=16, seed=seed)
    train_ds, test_ds = split_dataset(ds, 0.2, seed=seed)
    net = build_network("appsign-tiny", classes=8, seed=seed)
    net, _ = train(net, train_ds, TrainConfig(epochs=20, seed=seed))
    return net, train_ds, test_ds


@pytest.fixture(scope="session")
def trained_tiny():
    return train_tiny(0)
