"""Prompt parameterizations: plain VPT, fixed/tuned whitening, and low-rank bilinear.

Every method produces an effective prompt per prompted block:

    vpt       P
    fwhiten   P W^T   (W frozen)
    twhiten   P W^T   (W trained)
    bilinear  A B^T
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, PlacementError
from .model import check_placement

KINDS = ("vpt", "fwhiten", "twhiten", "bilinear")
KIND_CODES = {k: i for i, k in enumerate(KINDS)}
TENSORS = {"vpt": ("P",), "fwhiten": ("P", "W"), "twhiten": ("P", "W"), "bilinear": ("A", "B")}


@dataclass(frozen=True)
class PromptConfig:
    """``placement`` is "shallow", "deep", or an explicit tuple of 1-based blocks.

    With "deep", ``depth`` selects the top-k blocks (None = all).
    """

    kind: str = "bilinear"
    m: int = 4
    p: int | None = None
    placement: str | tuple = "shallow"
    depth: int | None = None
    init_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"prompt.kind must be one of {KINDS}, got {self.kind!r}")
        if self.m < 0:
            raise ConfigError(f"prompt.m must be non-negative, got {self.m}")
        if self.kind == "bilinear":
            if self.p is None or self.p < 1:
                raise ConfigError("prompt.p must be a positive integer for bilinear prompts")
        elif self.p is not None:
            raise ConfigError(f"prompt.p is only meaningful for bilinear prompts, not {self.kind}")
        if isinstance(self.placement, (list, tuple)):
            blocks = tuple(self.placement)
            if not blocks or any(not isinstance(b, int) or isinstance(b, bool) for b in blocks):
                raise ConfigError("explicit prompt.placement must be a non-empty list of block indices")
            if len(set(blocks)) != len(blocks):
                raise PlacementError(f"duplicate block in placement {blocks}")
            object.__setattr__(self, "placement", tuple(sorted(blocks)))
            if self.depth is not None:
                raise ConfigError("prompt.depth cannot be combined with an explicit block list")
        elif self.placement not in ("shallow", "deep"):
            raise ConfigError(f"prompt.placement must be 'shallow', 'deep' or a block list, got {self.placement!r}")
        elif self.placement == "shallow" and self.depth not in (None, 1):
            raise ConfigError("prompt.depth is only valid with deep placement")
        if self.depth is not None and self.depth < 1:
            raise ConfigError(f"prompt.depth must be >= 1, got {self.depth}")
        if self.init_scale <= 0:
            raise ConfigError("prompt.init_scale must be positive")

    def blocks(self, L: int) -> tuple:
        if isinstance(self.placement, tuple):
            check_placement(self.placement, L)
            return self.placement
        if self.placement == "shallow":
            return (1,)
        k = L if self.depth is None else self.depth
        if k > L:
            raise PlacementError(f"deep placement over top {k} blocks but the model has {L}")
        return tuple(range(L - k + 1, L + 1))


@dataclass
class PromptMethod:
    kind: str
    params: dict  # block -> {tensor name -> array}
    placement: tuple
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown prompt kind {self.kind!r}")
        if len(set(self.placement)) != len(self.placement):
            raise PlacementError(f"duplicate block in placement {self.placement}")
        if set(self.params) != set(self.placement):
            raise PlacementError("prompt tensors do not match placement")

    @property
    def m(self):
        return self.tensor(self.placement[0], "A" if self.kind == "bilinear" else "P").shape[0] if self.placement else 0

    def tensor(self, block, name):
        return self.params[block][name]

    def named_tensors(self) -> dict:
        return {f"prompt.block{b}.{k}": v for b in self.placement for k, v in self.params[b].items()}

    def is_trainable(self, name: str) -> bool:
        if not self.trainable:
            return False
        return not (self.kind == "fwhiten" and name == "W")

    def trainable_names(self) -> list:
        return [f"prompt.block{b}.{k}" for b in self.placement for k in self.params[b] if self.is_trainable(k)]

    def copy(self) -> "PromptMethod":
        return replace(self, params={b: {k: v.copy() for k, v in t.items()} for b, t in self.params.items()})

    def bind(self, tape, overrides: dict | None = None):
        """Create tape leaves for every tensor and return ``prompt_for(block)``.

        ``overrides`` maps full tensor names to arrays used in place of the
        stored values (the finite-difference checker perturbs through it).
        """
        overrides = overrides or {}
        nodes = {}
        for b in self.placement:
            for k, v in self.params[b].items():
                name = f"prompt.block{b}.{k}"
                nodes[(b, k)] = tape.leaf(overrides.get(name, v), name=name, trainable=self.is_trainable(k))
        cache = {}

        def prompt_for(b):
            if b not in self.params:
                return None
            if b not in cache:
                cache[b] = effective_prompt_node(tape, self.kind, lambda k: nodes[(b, k)])
            return cache[b]

        return prompt_for


def effective_prompt_node(tape, kind, get):
    if kind == "vpt":
        return get("P")
    if kind in ("fwhiten", "twhiten"):
        return tape.matmul(get("P"), tape.transpose(get("W")))
    return tape.matmul(get("A"), tape.transpose(get("B")))


def init_method(config: PromptConfig, model_config, whitening=None, seed: int = 0) -> PromptMethod:
    """Seeded initial state; P and A are U(+-1/sqrt(d)), B is U(+-1/sqrt(p)).

    ``whitening`` maps block index to a d x d matrix (or an object with a
    ``W`` attribute); it is required for the whitening kinds.
    """
    d = model_config.d
    placement = config.blocks(model_config.L)
    check_placement(placement, model_config.L)
    rng = np.random.default_rng(seed)
    s = config.init_scale

    def uniform(shape, fan):
        bound = s / math.sqrt(fan)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    for b in placement:
        if config.kind == "bilinear":
            params[b] = {"A": uniform((config.m, config.p), d), "B": uniform((d, config.p), config.p)}
            continue
        params[b] = {"P": uniform((config.m, d), d)}
        if config.kind in ("fwhiten", "twhiten"):
            if whitening is None or b not in whitening:
                raise ConfigError(f"{config.kind} needs a whitening matrix for block {b}")
            w = whitening[b]
            w = np.array(getattr(w, "W", w), dtype=np.float64)
            if w.shape != (d, d):
                raise ConfigError(f"whitening matrix for block {b} has shape {w.shape}, expected {(d, d)}")
            params[b]["W"] = w
    return PromptMethod(config.kind, params, placement)


def _effective(kind, t):
    if kind == "vpt":
        return t["P"]
    if kind in ("fwhiten", "twhiten"):
        return t["P"] @ t["W"].T
    return t["A"] @ t["B"].T


def effective_prompt(state: PromptMethod, block: int) -> np.ndarray:
    if block not in state.params:
        raise PlacementError(f"block {block} carries no prompt (placement {state.placement})")
    return _effective(state.kind, state.params[block])


def fold(state: PromptMethod) -> PromptMethod:
    """Collapse every two-factor prompt into a single frozen vpt-kind matrix."""
    if state.kind == "vpt":
        return replace(state.copy(), trainable=False)
    params = {b: {"P": effective_prompt(state, b)} for b in state.placement}
    return PromptMethod("vpt", params, tuple(state.placement), trainable=False)


def rank_of_effective_prompt(state: PromptMethod, block: int | None = None) -> int:
    block = state.placement[0] if block is None else block
    sv = np.linalg.svd(effective_prompt(state, block), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > 1e-9 * sv[0]))


def prompt_cosine_matrix(state: PromptMethod, block: int) -> np.ndarray:
    return cosine_matrix(effective_prompt(state, block))


def cosine_matrix(p: np.ndarray) -> np.ndarray:
    """Pairwise row cosine similarity; zero rows score 0 against everything."""
    norms = np.linalg.norm(p, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = p / safe[:, None]
    c = np.clip(u @ u.T, -1.0, 1.0)
    zero = norms == 0
    c[zero, :] = 0.0
    c[:, zero] = 0.0
    nz = np.flatnonzero(~zero)
    c[nz, nz] = 1.0
    return c
