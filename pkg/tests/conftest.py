import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from netcompress.datasets import load_dataset  # noqa: E402
from netcompress.tensor_net import Node, TrainConfig, conv2d, dense, mlp, sequential, train  # noqa: E402

BLOBS_TRAIN = dict(learning_rate=0.05, momentum=0.9, batch_size=16, epochs=50)


def blobs_reference(seed=0, hidden=(16,)):
    ds = load_dataset("blobs", seed=seed)
    model, history = train(mlp(2, list(hidden), 2, seed), ds, TrainConfig(seed=seed, **BLOBS_TRAIN))
    return ds, model, history


@pytest.fixture(scope="session")
def blobs():
    return blobs_reference(0)


def dense_chain(seed=0):
    rng = np.random.default_rng(seed)
    return sequential((4,), [dense("fc0", 4, 3, rng), Node("relu0", "relu", []),
                             dense("fc1", 3, 2, rng)])


def conv_chain(seed=0):
    """conv(2->4, 3x3) on 2x4x4 -> relu -> flatten(16) -> dense(16->3)."""
    rng = np.random.default_rng(seed)
    return sequential((2, 4, 4), [conv2d("conv0", 2, 4, 3, rng), Node("relu0", "relu", []),
                                  Node("flatten", "flatten", []), dense("fc0", 16, 3, rng)])


def residual_net(seed=0):
    """fc0 -> relu -> fc1, added back onto the relu output, then relu -> fc2."""
    from netcompress.tensor_net import Model
    rng = np.random.default_rng(seed)
    nodes = [
        dense("fc0", 4, 6, rng, inputs=[-1]),
        Node("relu0", "relu", [0]),
        dense("fc1", 6, 6, rng, inputs=[1]),
        Node("add", "add", [2, 1]),
        Node("relu1", "relu", [3]),
        dense("fc2", 6, 3, rng, inputs=[4]),
    ]
    return Model((4,), nodes)


def randomize(model, seed, scale=1.0):
    """Copy of ``model`` with every parameter (biases included) drawn from N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    return model.with_parameters({k: scale * rng.standard_normal(v.shape)
                                  for k, v in model.parameters().items()})


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
