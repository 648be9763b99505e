"""Checkpoints as ``BPTT`` containers.

Tensor names:
    backbone.*, head.w, head.b          frozen backbone (head.* is the backbone's own head)
    tuned_head.w, tuned_head.b          head after training, when present
    prompt.block{b}.P|W|A|B             prompt tensors
    whiten.block{b}.sigma|W             whitening estimates
Manifest entries are small numeric tensors under ``meta.*``:
    meta.model              [d, L, h, n, patch_dim, num_classes, mlp_ratio]
    meta.prompt.kind        [code]  (0 vpt, 1 fwhiten, 2 twhiten, 3 bilinear)
    meta.prompt.placement   [b1, b2, ...]
    meta.prompt.trainable   [0 or 1]
    meta.whiten.block{b}    [eps, sample_count, centered]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import read_tensors, write_tensors
from .errors import FormatError
from .model import BackboneWeights, Head, ModelConfig
from .prompts import KIND_CODES, KINDS, TENSORS, PromptMethod
from .whitening import WhiteningEstimate

MODEL_FIELDS = ("d", "L", "h", "n", "patch_dim", "num_classes", "mlp_ratio")


@dataclass
class Checkpoint:
    backbone: BackboneWeights
    method: PromptMethod | None = None
    head: Head | None = None
    whitening: dict | None = None


def _row(values):
    return np.asarray(values, dtype=np.float64).reshape(1, -1)


def checkpoint_tensors(ck: Checkpoint) -> dict:
    c = ck.backbone.config
    out = {"meta.model": _row([getattr(c, f) for f in MODEL_FIELDS])}
    out.update(ck.backbone.tensors())
    if ck.head is not None:
        out["tuned_head.w"] = ck.head.w
        out["tuned_head.b"] = ck.head.b
    if ck.method is not None:
        out["meta.prompt.kind"] = _row([KIND_CODES[ck.method.kind]])
        out["meta.prompt.placement"] = _row(ck.method.placement)
        out["meta.prompt.trainable"] = _row([int(ck.method.trainable)])
        out.update(ck.method.named_tensors())
    for b, est in sorted((ck.whitening or {}).items()):
        out[f"whiten.block{b}.sigma"] = est.sigma
        out[f"whiten.block{b}.W"] = est.W
        out[f"meta.whiten.block{b}"] = _row([est.eps, est.sample_count, int(est.centered)])
    return out


def save_checkpoint(path, ck: Checkpoint):
    write_tensors(path, checkpoint_tensors(ck))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_tensors(read_tensors(path))


def _need(t, name):
    if name not in t:
        raise FormatError(f"checkpoint is missing tensor {name!r}")
    return t[name]


def checkpoint_from_tensors(t: dict) -> Checkpoint:
    vals = [int(v) for v in _need(t, "meta.model").ravel()]
    if len(vals) != len(MODEL_FIELDS):
        raise FormatError("meta.model has the wrong length")
    config = ModelConfig(**dict(zip(MODEL_FIELDS, vals)))
    try:
        backbone = BackboneWeights.from_tensors(config, t)
    except KeyError as e:
        raise FormatError(f"checkpoint is missing tensor {e.args[0]!r}") from None

    head = None
    if "tuned_head.w" in t:
        head = Head(t["tuned_head.w"], _need(t, "tuned_head.b"))

    method = None
    if "meta.prompt.kind" in t:
        code = int(t["meta.prompt.kind"].ravel()[0])
        if not 0 <= code < len(KINDS):
            raise FormatError(f"unknown prompt kind code {code}")
        kind = KINDS[code]
        placement = tuple(int(b) for b in _need(t, "meta.prompt.placement").ravel())
        trainable = bool(int(_need(t, "meta.prompt.trainable").ravel()[0]))
        params = {b: {k: _need(t, f"prompt.block{b}.{k}") for k in TENSORS[kind]} for b in placement}
        method = PromptMethod(kind, params, placement, trainable)

    whitening = {}
    for name in t:
        if name.startswith("meta.whiten.block"):
            b = int(name[len("meta.whiten.block"):])
            eps, count, centered = t[name].ravel()
            whitening[b] = WhiteningEstimate(_need(t, f"whiten.block{b}.sigma"), _need(t, f"whiten.block{b}.W"),
                                             int(count), float(eps), b, bool(centered))
    return Checkpoint(backbone, method, head, whitening or None)
