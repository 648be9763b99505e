import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpt.errors import ConfigError, PlacementError
from bpt.linalg import sym_eig
from bpt.model import ModelConfig, forward, init_backbone
from bpt.prompts import (PromptConfig, PromptMethod, cosine_matrix, effective_prompt, fold, init_method,
                         rank_of_effective_prompt)


def gram_rank(p, rtol=1e-9):
    """Rank from the eigenvalues of P P^T (squared singular values)."""
    ev = sym_eig(p @ p.T).eigenvalues
    if ev[0] <= 0:
        return 0
    return int(np.sum(ev > (rtol ** 2) * ev[0]))


def whitening_for(cfg, blocks, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for b in blocks:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.d, cfg.d)))
        out[b] = (q * rng.uniform(0.5, 2.0, cfg.d)) @ q.T
    return out


def test_config_validation():
    with pytest.raises(ConfigError):
        PromptConfig("bilinear", m=4)
    with pytest.raises(ConfigError):
        PromptConfig("vpt", m=4, p=2)
    with pytest.raises(ConfigError):
        PromptConfig("nope", m=4)
    with pytest.raises(ConfigError):
        PromptConfig("vpt", m=-1)
    with pytest.raises(PlacementError):
        PromptConfig("vpt", m=1, placement=(2, 2))


def test_block_selection():
    assert PromptConfig("vpt", placement="shallow").blocks(12) == (1,)
    assert PromptConfig("vpt", placement="deep").blocks(4) == (1, 2, 3, 4)
    assert PromptConfig("vpt", placement="deep", depth=2).blocks(4) == (3, 4)
    assert PromptConfig("vpt", placement=[4, 2]).blocks(4) == (2, 4)
    with pytest.raises(PlacementError):
        PromptConfig("vpt", placement=[13]).blocks(12)
    with pytest.raises(PlacementError):
        PromptConfig("vpt", placement="deep", depth=5).blocks(4)


def test_init_shapes_and_bounds():
    cfg = ModelConfig(d=16, L=3)
    st_ = init_method(PromptConfig("bilinear", m=5, p=3, placement="deep"), cfg, seed=1)
    assert st_.placement == (1, 2, 3)
    assert st_.params[2]["A"].shape == (5, 3) and st_.params[2]["B"].shape == (16, 3)
    assert np.abs(st_.params[1]["A"]).max() <= 1 / 4
    assert np.abs(st_.params[1]["B"]).max() <= 1 / np.sqrt(3)
    assert st_.m == 5


def test_whitening_kind_needs_matrix():
    with pytest.raises(ConfigError):
        init_method(PromptConfig("twhiten", m=2), ModelConfig(d=8, L=2))


def test_trainable_flags():
    cfg = ModelConfig(d=8, L=2)
    w = whitening_for(cfg, (1,))
    f = init_method(PromptConfig("fwhiten", m=2), cfg, w)
    t = init_method(PromptConfig("twhiten", m=2), cfg, w)
    assert f.trainable_names() == ["prompt.block1.P"]
    assert t.trainable_names() == ["prompt.block1.P", "prompt.block1.W"]
    assert fold(t).trainable_names() == []


def test_effective_prompt_formulas():
    cfg = ModelConfig(d=8, L=2)
    w = whitening_for(cfg, (1,))
    s = init_method(PromptConfig("twhiten", m=3), cfg, w, seed=2)
    np.testing.assert_array_equal(effective_prompt(s, 1), s.params[1]["P"] @ w[1].T)
    b = init_method(PromptConfig("bilinear", m=3, p=2), cfg, seed=2)
    np.testing.assert_array_equal(effective_prompt(b, 1), b.params[1]["A"] @ b.params[1]["B"].T)
    with pytest.raises(PlacementError):
        effective_prompt(b, 2)


@pytest.mark.parametrize("kind", ["vpt", "fwhiten", "twhiten", "bilinear"])
def test_fold_preserves_logits(kind):
    cfg = ModelConfig(d=8, L=3, n=4, patch_dim=6, num_classes=3)
    bb = init_backbone(cfg, 0)
    blocks = (2, 3)
    pc = PromptConfig(kind, m=3, p=2 if kind == "bilinear" else None, placement="deep", depth=2)
    s = init_method(pc, cfg, whitening_for(cfg, blocks), seed=1)
    f = fold(s)
    assert f.kind == "vpt" and not f.trainable and f.placement == blocks
    x = np.random.default_rng(0).standard_normal((4, 6))
    a, b = forward(x, bb, s), forward(x, bb, f)
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))


def test_fold_of_vpt_is_identity():
    s = init_method(PromptConfig("vpt", m=3), ModelConfig(d=8, L=2), seed=4)
    np.testing.assert_array_equal(fold(s).params[1]["P"], s.params[1]["P"])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_bilinear_gauge_invariance(m, p, seed):
    # (A R, B R^{-T}) gives the same effective prompt for any invertible R
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, p)), rng.standard_normal((8, p))
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    r = q * rng.uniform(0.5, 2.0, p)
    s1 = PromptMethod("bilinear", {1: {"A": a, "B": b}}, (1,))
    s2 = PromptMethod("bilinear", {1: {"A": a @ r, "B": b @ np.linalg.inv(r).T}}, (1,))
    np.testing.assert_allclose(effective_prompt(s1, 1), effective_prompt(s2, 1), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_bilinear_rank_bound(m, p, seed):
    rng = np.random.default_rng(seed)
    s = PromptMethod("bilinear", {1: {"A": rng.standard_normal((m, p)), "B": rng.standard_normal((12, p))}}, (1,))
    r = rank_of_effective_prompt(s)
    assert r <= min(m, p)
    assert r == gram_rank(effective_prompt(s, 1), rtol=1e-6)


def test_rank_of_zero_prompt():
    s = PromptMethod("vpt", {1: {"P": np.zeros((3, 4))}}, (1,))
    assert rank_of_effective_prompt(s) == 0


def test_cosine_matrix():
    p = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
    c = cosine_matrix(p)
    np.testing.assert_allclose(c, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 0]])
