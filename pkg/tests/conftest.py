import numpy as np
import pytest

from aaalab.model import LabeledDataset, make_blobs, quantize8, train_mlp


@pytest.fixture(scope="session")
def toy():
    """Small trained MLP plus a quantized held-out split."""
    data = make_blobs(200, 3, 16, 0.08, seed=0)
    data = LabeledDataset(quantize8(data.x), data.y, data.classes)
    order = np.random.default_rng(0).permutation(len(data))
    train, held = data.subset(order[:400]), data.subset(order[400:])
    weights, _ = train_mlp(train, (32, 32), epochs=30, seed=0)
    return weights, held
