import math

import numpy as np
import pytest

from bpt.errors import ConfigError, PlacementError, ShapeError
from bpt.model import ModelConfig, forward, init_backbone, validate_backbone
from bpt.prompts import PromptConfig, PromptMethod, init_method


def ref_layer_norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_forward(patches, bb, prompts=None):
    """Loop-based reference ViT written without the tape."""
    c = bb.config
    prompts = prompts or {}
    x = patches @ bb.patch_proj
    m = 0
    for b, blk in enumerate(bb.blocks, start=1):
        if b in prompts:
            x = np.vstack([prompts[b], x[m:]])
            m = prompts[b].shape[0]
        hn = ref_layer_norm(x, blk.ln1_g, blk.ln1_b)
        q, k, v = hn @ blk.wq, hn @ blk.wk, hn @ blk.wv
        out = np.zeros_like(x)
        dk = c.d // c.h
        for i in range(c.h):
            sl = slice(i * dk, (i + 1) * dk)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            out[:, sl] = a @ v[:, sl]
        x = x + out @ blk.wo
        hn = ref_layer_norm(x, blk.ln2_g, blk.ln2_b)
        x = x + ref_gelu(hn @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
    return x.mean(axis=0, keepdims=True) @ bb.head.w + bb.head.b


@pytest.mark.parametrize("h", [1, 2])
def test_forward_matches_reference(h):
    cfg = ModelConfig(d=4, L=2, h=h, n=3, patch_dim=5, num_classes=2)
    bb = init_backbone(cfg, seed=1)
    x = np.random.default_rng(2).standard_normal((3, 5))
    np.testing.assert_allclose(forward(x, bb), ref_forward(x, bb), rtol=1e-12, atol=1e-14)


def test_deep_prompts_match_reference():
    cfg = ModelConfig(d=4, L=3, h=1, n=3, patch_dim=5, num_classes=2)
    bb = init_backbone(cfg, seed=1)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 5))
    prompts = {2: rng.standard_normal((2, 4)), 3: rng.standard_normal((2, 4))}
    method = PromptMethod("vpt", {b: {"P": p} for b, p in prompts.items()}, (2, 3))
    np.testing.assert_allclose(forward(x, bb, method), ref_forward(x, bb, prompts), rtol=1e-12, atol=1e-14)


def test_patch_permutation_invariance(tiny_backbone):
    # no positional embedding and mean pooling: logits ignore patch order
    x = np.random.default_rng(0).standard_normal((4, 6))
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(forward(x[perm], tiny_backbone), forward(x, tiny_backbone), rtol=1e-12)


def test_empty_prompt_is_bitwise_noop(tiny_config, tiny_backbone):
    x = np.random.default_rng(0).standard_normal((4, 6))
    method = init_method(PromptConfig("vpt", m=0), tiny_config)
    np.testing.assert_array_equal(forward(x, tiny_backbone, method), forward(x, tiny_backbone))


def test_deep_prompt_keeps_sequence_length(tiny_config, tiny_backbone):
    method = init_method(PromptConfig("vpt", m=3, placement="deep"), tiny_config)
    probes = {}
    forward(np.ones((4, 6)), tiny_backbone, method, probes=probes)
    assert [probes[b]["normed"].shape[0] for b in (1, 2)] == [7, 7]
    assert [probes[b]["m"] for b in (1, 2)] == [3, 3]


def test_probe_scores_shape(tiny_backbone):
    probes = {}
    forward(np.ones((4, 6)), tiny_backbone, probes=probes)
    assert probes[1]["scores"][0].shape == (4, 4)
    np.testing.assert_allclose(probes[1]["attn"][0].sum(axis=1), 1.0)


def test_placement_outside_model(tiny_backbone):
    method = PromptMethod("vpt", {3: {"P": np.zeros((1, 8))}}, (3,))
    with pytest.raises(PlacementError):
        forward(np.ones((4, 6)), tiny_backbone, method)


def test_wrong_patch_width(tiny_backbone):
    with pytest.raises(ShapeError):
        forward(np.ones((4, 5)), tiny_backbone)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=6, h=4)
    with pytest.raises(ConfigError):
        ModelConfig(L=0)


def test_init_is_seeded(tiny_config):
    a, b = init_backbone(tiny_config, 3), init_backbone(tiny_config, 3)
    assert a.digest() == b.digest()
    assert a.digest() != init_backbone(tiny_config, 4).digest()
    validate_backbone(a)
