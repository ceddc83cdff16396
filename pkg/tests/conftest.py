import numpy as np
import pytest

from shiftextract import (
    KIND_ARGMAX,
    KIND_FC,
    KIND_INPUT,
    KIND_RELU,
    LayerSpec,
    ModelGraph,
    random_model,
)


def fc_layer(lid, pred, weight, bias):
    return LayerSpec(
        id=lid, kind=KIND_FC, inputs=(pred,),
        weight=np.asarray(weight, dtype=np.float64),
        bias=np.asarray(bias, dtype=np.float64),
    )


@pytest.fixture
def toy_pm1_model():
    """x0 scalar; hidden pre-activations [x0 + 1, x0 - 1]; logits
    [z0 - z1, z1 - z0]."""
    layers = [
        LayerSpec(id=0, kind=KIND_INPUT, shape=(1,)),
        fc_layer(1, 0, [[1.0], [1.0]], [1.0, -1.0]),
        LayerSpec(id=2, kind=KIND_RELU, inputs=(1,)),
        fc_layer(3, 2, [[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0]),
        LayerSpec(id=4, kind=KIND_ARGMAX, inputs=(3,)),
    ]
    return ModelGraph(layers, output=4)


@pytest.fixture
def zero3_model():
    """Zero-parameter model with three classes: logits are exactly the
    shift applied at the argmax boundary."""
    layers = [
        LayerSpec(id=0, kind=KIND_INPUT, shape=(2,)),
        fc_layer(1, 0, np.zeros((3, 2)), np.zeros(3)),
        LayerSpec(id=2, kind=KIND_RELU, inputs=(1,)),
        fc_layer(3, 2, np.zeros((3, 3)), np.zeros(3)),
        LayerSpec(id=4, kind=KIND_ARGMAX, inputs=(3,)),
    ]
    return ModelGraph(layers, output=4)


@pytest.fixture
def small_cnn():
    return random_model("conv3x3x3-r-fc8-r-fc3", (2, 5, 5), seed=17)
