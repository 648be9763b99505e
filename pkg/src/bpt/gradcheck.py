"""Central finite-difference verification of tape gradients for prompt tensors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import generate
from .errors import SizeError
from .model import ModelConfig, init_backbone
from .prompts import PromptConfig, init_method
from .train import batch_loss
from .whitening import estimate_blocks

MAX_PARAMS = 5000


@dataclass
class GradCheckReport:
    per_tensor: dict  # name -> (max rel err, mean rel err, entries)
    max_rel_err: float
    mean_rel_err: float
    checked: int
    h: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def relative_error(ga, gfd):
    return np.abs(ga - gfd) / np.maximum(1e-8, np.abs(ga) + np.abs(gfd))


def check_gradients(loss_fn, params: dict, analytic: dict, h: float) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn(overrides)``."""
    per, errs = {}, []
    for name, value in params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus, minus = value.copy(), value.copy()
            plus[idx] += h
            minus[idx] -= h
            fd[idx] = (loss_fn({name: plus}) - loss_fn({name: minus})) / (2 * h)
        err = relative_error(analytic[name], fd).ravel()
        per[name] = (float(err.max(initial=0.0)), float(err.mean()) if err.size else 0.0, int(err.size))
        errs.append(err)
    allerr = np.concatenate(errs) if errs else np.zeros(0)
    return GradCheckReport(per, float(allerr.max(initial=0.0)),
                           float(allerr.mean()) if allerr.size else 0.0, int(allerr.size), h)


def grad_check(model_config: ModelConfig, prompt_config: PromptConfig, seed: int = 0, h: float = 1e-5,
               batch: int = 2, include_head: bool = False, probe_images: int = 16) -> GradCheckReport:
    """Analytic vs central-difference gradients on a seeded tiny setup.

    Only tensors flagged trainable are checked (the frozen backbone and a
    fixed whitening matrix are excluded).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    backbone = init_backbone(model_config, seed)
    per_class = max(1, -(-max(batch, probe_images) // model_config.num_classes))
    data = generate("gaussian-blobs", model_config.num_classes, per_class, seed,
                    n=model_config.n, patch_dim=model_config.patch_dim)
    idx = sorted(np.random.default_rng(seed).permutation(len(data))[:batch])
    samples, labels = [data.samples[i] for i in idx], [data.labels[i] for i in idx]
    whitening = None
    if prompt_config.kind in ("fwhiten", "twhiten"):
        probe = data.subset(probe_images, seed)
        whitening = estimate_blocks(backbone, prompt_config.blocks(model_config.L), probe)
    method = init_method(prompt_config, model_config, whitening, seed)
    head = backbone.head

    params = {name: t for name, t in method.named_tensors().items() if name in method.trainable_names()}
    if include_head:
        params.update({"head.w": head.w, "head.b": head.b})
    total = sum(v.size for v in params.values())
    if total > MAX_PARAMS:
        raise SizeError(f"{total} trainable entries exceed the finite-difference cap of {MAX_PARAMS}")
    if total == 0:
        warnings.warn("no trainable prompt entries; gradient check is vacuous", stacklevel=2)

    tape, loss = batch_loss(backbone, method, head, samples, labels, train_head=include_head)
    analytic = tape.backward(loss).grads

    def loss_fn(overrides):
        return float(batch_loss(backbone, method, head, samples, labels, train_head=False,
                                overrides=overrides)[1].value[0, 0])

    return check_gradients(loss_fn, params, analytic, h)
