import numpy as np
import pytest

from bpt.model import ModelConfig, init_backbone


def random_spd(rng, d, cond):
    """SPD matrix with eigenvalues log-spaced between 1 and ``cond``."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    s = np.logspace(0, np.log10(cond), d)
    return (q * s) @ q.T


@pytest.fixture
def tiny_config():
    return ModelConfig(d=8, L=2, h=1, n=4, patch_dim=6, num_classes=3)


@pytest.fixture
def tiny_backbone(tiny_config):
    return init_backbone(tiny_config, seed=0)
