import numpy as np
import pytest

import epirecon as er


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_relu_1d():
    """R(x) = relu(x) on scalars."""
    layer = er.IcnnLayer(er.Dense([[1.0]]), None, [0.0], er.Activation("relu"))
    return er.IcnnSpec((1,), (layer,))


def make_two_layer_1d():
    """z1 = relu(x); R = x + z1 (identity final layer, both weights 1)."""
    l1 = er.IcnnLayer(er.Dense([[1.0]]), None, [0.0], er.Activation("relu"))
    l2 = er.IcnnLayer(er.Dense([[1.0]]), er.Dense([[1.0]]), [0.0],
                      er.Activation("identity"))
    return er.IcnnSpec((1,), (l1, l2))
