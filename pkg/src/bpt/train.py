"""Prompt tuning over a frozen backbone with AdamW and warmup + cosine decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ConfigError, DivergenceError, ShapeError
from .model import Head, check_placement, embed_node, forward_tape


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-2
    weight_decay: float = 0.0
    warmup_steps: int = 10
    total_steps: int = 200
    final_lr: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_head: bool = True
    head_weight_decay: float | None = None  # None: same as weight_decay

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("train.total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("train.warmup_steps must lie in [0, total_steps]")
        if self.base_lr < 0 or self.final_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.weight_decay < 0 or (self.head_weight_decay or 0) < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid AdamW moment parameters")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to ``final_lr``."""
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    if step < config.warmup_steps:
        return config.base_lr * (step + 1) / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    t = (step - config.warmup_steps) / span
    return config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, step: int, lr: float,
                   config: TrainConfig, weight_decay: dict | None = None):
    """One in-place AdamW update of every array in ``params``.

    ``step`` is zero-based; bias correction uses ``step + 1``. Decay is
    decoupled: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    b1, b2 = config.beta1, config.beta2
    t = step + 1
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        wd = config.weight_decay if weight_decay is None else weight_decay.get(name, config.weight_decay)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + config.adam_eps) + wd * theta)


@dataclass
class StepLog:
    step: int
    loss: float
    lr: float
    grad_inf_norm: dict
    max_abs_param: dict

    def csv_line(self) -> str:
        g = max(self.grad_inf_norm.values(), default=0.0)
        p = max(self.max_abs_param.values(), default=0.0)
        return f"{self.step},{self.loss!r},{self.lr!r},{g!r},{p!r}\n"


CSV_HEADER = "step,loss,lr,grad_inf_norm,max_abs_param\n"


def batch_loss(backbone, method, head: Head, samples, labels, embedded=False, train_head=True,
               overrides: dict | None = None):
    """Mean cross-entropy over a batch on one tape. Returns ``(tape, loss_node)``."""
    tape = Tape()
    prompt_for = method.bind(tape, overrides) if method is not None else None
    overrides = overrides or {}
    hw = tape.leaf(overrides.get("head.w", head.w), name="head.w", trainable=train_head)
    hb = tape.leaf(overrides.get("head.b", head.b), name="head.b", trainable=train_head)
    logits = [forward_tape(tape, embed_node(tape, s, backbone, embedded), backbone, prompt_for, (hw, hb))
              for s in samples]
    stacked = logits[0] if len(logits) == 1 else tape.concat_rows(*logits)
    return tape, tape.cross_entropy(stacked, labels)


def evaluate(backbone, method, head, dataset) -> tuple:
    """(mean loss, accuracy) over the full dataset."""
    tape, loss = batch_loss(backbone, method, head, dataset.samples, dataset.labels, dataset.embedded, False)
    logits = loss.parents[0].value
    acc = float(np.mean(np.argmax(logits, axis=1) == np.asarray(dataset.labels)))
    return float(loss.value[0, 0]), acc


@dataclass
class TrainResult:
    method: object
    head: Head
    logs: list


def train(backbone, method, dataset, config: TrainConfig, head: Head | None = None, on_step=None) -> TrainResult:
    """Optimize the trainable prompt tensors (and the head unless frozen).

    Works on copies; the backbone is only read. Deterministic for a fixed seed:
    each epoch visits the data in a seeded permutation.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if method is not None:
        check_placement(method.placement, backbone.config.L)
    method = method.copy() if method is not None else None
    head = (head or backbone.head).copy()

    params = {}
    if method is not None:
        for b in method.placement:
            for k, arr in method.params[b].items():
                if method.is_trainable(k):
                    params[f"prompt.block{b}.{k}"] = arr
    if config.train_head:
        params["head.w"] = head.w
        params["head.b"] = head.b
    wd = {}
    if config.head_weight_decay is not None:
        wd = {"head.w": config.head_weight_decay, "head.b": config.head_weight_decay}

    rng = np.random.default_rng(config.seed)
    order, pos = rng.permutation(len(dataset)), 0
    adam = AdamState()
    logs = []
    for step in range(config.total_steps):
        idx = []
        while len(idx) < min(config.batch_size, len(dataset)):
            if pos == len(order):
                order, pos = rng.permutation(len(dataset)), 0
            idx.append(int(order[pos]))
            pos += 1
        tape, loss = batch_loss(backbone, method, head, [dataset.samples[i] for i in idx],
                                [dataset.labels[i] for i in idx], dataset.embedded, config.train_head)
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        grads = tape.backward(loss, step).grads
        lr = lr_at(step, config)
        optimizer_step(params, grads, adam, step, lr, config, wd)
        log = StepLog(step, value, lr,
                      {k: float(np.max(np.abs(g), initial=0.0)) for k, g in grads.items()},
                      {k: float(np.max(np.abs(p), initial=0.0)) for k, p in params.items()})
        logs.append(log)
        if on_step is not None:
            on_step(log, method, head)
    return TrainResult(method, head, logs)
