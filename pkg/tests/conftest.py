import numpy as np
import pytest

from invvc.model import InvvcModel, ModelConfig, NetConfig


def toy_config(channels=8, d_h=16, inner=20, n_invconv=1, n_flows=1, n_blocks=1, kernels=(3, 1)):
    net = NetConfig(
        n_blocks=n_blocks, d_h=d_h, block_inner_channels=inner, block_kernels=kernels
    )
    return ModelConfig(n_channels=channels, n_invconv=n_invconv, n_flows=n_flows, net=net)


def randomize(model: InvvcModel, seed=0, scale=0.3):
    """Replace every net parameter (zero-initialized ones included) with random values.

    Invertible-convolution weights keep their orthonormal init.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.startswith("invconv"):
            continue
        p.data = (scale * rng.standard_normal(p.shape)).astype(model.dtype)
        if name.endswith("gamma"):
            p.data = p.data + 1.0
    return model


@pytest.fixture
def toy():
    return toy_config()


@pytest.fixture
def random_model(toy):
    return randomize(InvvcModel(toy, seed=3), seed=4)
