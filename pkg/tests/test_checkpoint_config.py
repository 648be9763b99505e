import json

import pytest

from bpt.checkpoint import Checkpoint, checkpoint_tensors, checkpoint_from_tensors, load_checkpoint, save_checkpoint
from bpt.config import load_config, parse_config
from bpt.data import generate
from bpt.errors import ConfigError, FormatError, PlacementError
from bpt.model import ModelConfig, init_backbone
from bpt.prompts import PromptConfig, fold, init_method
from bpt.whitening import estimate_blocks

MODEL = {"d": 8, "L": 2, "n": 4, "patch_dim": 6, "num_classes": 3}


def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    cfg = ModelConfig(**MODEL)
    bb = init_backbone(cfg, 0)
    data = generate("gaussian-blobs", 3, 3, 0, n=4, patch_dim=6)
    whit = estimate_blocks(bb, (1, 2), data.samples)
    method = init_method(PromptConfig("twhiten", m=2, placement="deep"), cfg, whit, seed=1)
    ck = Checkpoint(bb, method, bb.head.copy(), whit)
    save_checkpoint(tmp_path / "a.bptt", ck)
    back = load_checkpoint(tmp_path / "a.bptt")
    assert back.backbone.digest() == bb.digest()
    assert back.method.kind == "twhiten" and back.method.placement == (1, 2)
    assert back.whitening[2].sample_count == whit[2].sample_count
    save_checkpoint(tmp_path / "b.bptt", back)
    assert (tmp_path / "a.bptt").read_bytes() == (tmp_path / "b.bptt").read_bytes()


def test_folded_checkpoint_is_frozen_vpt(tmp_path):
    cfg = ModelConfig(**MODEL)
    bb = init_backbone(cfg, 0)
    method = fold(init_method(PromptConfig("bilinear", m=2, p=1), cfg, seed=1))
    save_checkpoint(tmp_path / "f.bptt", Checkpoint(bb, method))
    back = load_checkpoint(tmp_path / "f.bptt")
    assert back.method.kind == "vpt" and not back.method.trainable and back.head is None


def test_missing_tensor_is_format_error():
    bb = init_backbone(ModelConfig(**MODEL), 0)
    t = checkpoint_tensors(Checkpoint(bb, init_method(PromptConfig("vpt", m=2), bb.config)))
    del t["prompt.block1.P"]
    with pytest.raises(FormatError):
        checkpoint_from_tensors(t)
    t = checkpoint_tensors(Checkpoint(bb))
    del t["backbone.block2.wq"]
    with pytest.raises(FormatError):
        checkpoint_from_tensors(t)


def test_config_defaults_and_seed():
    cfg = parse_config({"model": MODEL, "prompt": {"kind": "fwhiten", "m": 2}, "seed": 4})
    assert cfg.whitening.images == 100 and cfg.train.seed == 4
    assert parse_config({"model": MODEL, "prompt": {"kind": "vpt", "m": 2}}, seed_override=9).train.seed == 9


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="model.depth"):
        parse_config({"model": dict(MODEL, depth=3), "prompt": {"kind": "vpt", "m": 2}})
    with pytest.raises(ConfigError):
        parse_config({"model": MODEL, "prompt": {"kind": "vpt", "m": 2}, "extra": {}})
    with pytest.raises(ConfigError, match="train.seed"):
        parse_config({"model": MODEL, "prompt": {"kind": "vpt", "m": 2}, "train": {"seed": 1}})


def test_config_cross_checks():
    with pytest.raises(ConfigError):
        parse_config({"model": MODEL, "prompt": {"kind": "vpt", "m": 2}, "whitening": {}})
    with pytest.raises(PlacementError):
        parse_config({"model": dict(MODEL, L=12), "prompt": {"kind": "vpt", "m": 2, "placement": [13]}})
    with pytest.raises(ConfigError):
        parse_config({"model": MODEL})


def test_config_digest_tracks_content():
    raw = {"model": MODEL, "prompt": {"kind": "vpt", "m": 2}}
    assert parse_config(raw).digest() == parse_config(json.loads(json.dumps(raw))).digest()
    assert parse_config(raw).digest() != parse_config(raw, seed_override=1).digest()


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


@pytest.mark.parametrize("name", ["train_vpt", "train_fwhiten", "train_twhiten", "train_bilinear",
                                  "count_vpt_shallow", "gradcheck_bilinear"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    cfg = load_config(Path(__file__).parent.parent / "configs" / f"{name}.json")
    assert cfg.model.d in (8, 32, 768)
