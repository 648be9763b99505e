"""Shared driver for the seeded training regressions and their frozen fixtures."""
import json
import os
from pathlib import Path

from bpt.checkpoint import Checkpoint, checkpoint_tensors
from bpt.config import load_config
from bpt.data import generate, write_tensors
from bpt.model import init_backbone
from bpt.prompts import init_method
from bpt.train import evaluate, train
from bpt.whitening import estimate_blocks

ROOT = Path(__file__).resolve().parent.parent
KINDS = ("vpt", "fwhiten", "twhiten", "bilinear")
FIXTURE = ROOT / "tests" / "fixtures" / "loss_curves.json"


def config_path(kind):
    return ROOT / "configs" / f"train_{kind}.json"


def run(kind, checkpoint_path=None):
    """Train one method from its checked-in config, mirroring ``bpt train``."""
    cfg = load_config(config_path(kind))
    bb = init_backbone(cfg.model, cfg.seed)
    data = generate(cfg.data.recipe, cfg.model.num_classes, cfg.data.samples_per_class, cfg.seed,
                    n=cfg.model.n, patch_dim=cfg.model.patch_dim, snr=cfg.data.snr)
    blocks = cfg.prompt.blocks(cfg.model.L)
    whit = None
    if cfg.whitening is not None:
        probe = data.subset(min(cfg.whitening.images, len(data)), cfg.seed)
        whit = estimate_blocks(bb, blocks, probe, cfg.whitening.eps, cfg.whitening.center)
    method = init_method(cfg.prompt, cfg.model, whit, cfg.seed)
    digest_before = bb.digest()
    w_before = {b: method.params[b]["W"].tobytes() for b in blocks} if kind == "fwhiten" else {}
    before, _ = evaluate(bb, method, bb.head, data)
    result = train(bb, method, data, cfg.train)
    after, acc = evaluate(bb, result.method, result.head, data)
    ck = Checkpoint(bb, result.method, result.head, whit)
    if checkpoint_path is not None:
        write_tensors(checkpoint_path, checkpoint_tensors(ck))
    return {
        "before": before, "after": after, "accuracy": acc,
        "losses": [log.loss for log in result.logs],
        "csv": "".join(log.csv_line() for log in result.logs),
        "backbone_unchanged": bb.digest() == digest_before,
        "fwhiten_w_unchanged": all(result.method.params[b]["W"].tobytes() == w for b, w in w_before.items()),
    }


if __name__ == "__main__":
    out = {}
    for kind in KINDS:
        r = run(kind)
        out[kind] = {"before": r["before"], "after": r["after"], "losses": r["losses"]}
        print(kind, r["before"], r["after"], r["after"] / r["before"])
    os.makedirs(FIXTURE.parent, exist_ok=True)
    FIXTURE.write_text(json.dumps(out, indent=1) + "\n")
