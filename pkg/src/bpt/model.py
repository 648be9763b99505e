"""Frozen miniature ViT: patch embedding, pre-norm attention blocks, pooled head.

There is no classification token and no positional embedding. Prompt rows are
prepended to the token sequence and the head reads the mean over every row.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ConfigError, PlacementError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    L: int = 4
    h: int = 1
    n: int = 16
    patch_dim: int = 24
    num_classes: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        for k in ("d", "L", "h", "n", "patch_dim", "num_classes", "mlp_ratio"):
            if getattr(self, k) < 1:
                raise ConfigError(f"model.{k} must be positive, got {getattr(self, k)}")
        if self.d % self.h:
            raise ConfigError(f"model.d={self.d} is not divisible by model.h={self.h}")

    @property
    def d_k(self):
        return self.d // self.h


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass
class Head:
    w: np.ndarray
    b: np.ndarray

    def copy(self):
        return Head(self.w.copy(), self.b.copy())


@dataclass
class BackboneWeights:
    config: ModelConfig
    patch_proj: np.ndarray
    blocks: list
    head: Head = field(default=None)

    def tensors(self) -> dict:
        """Named view of every frozen tensor, in a fixed order."""
        out = {"backbone.patch_proj": self.patch_proj}
        for b, blk in enumerate(self.blocks, start=1):
            for f in BlockWeights.FIELDS:
                out[f"backbone.block{b}.{f}"] = getattr(blk, f)
        out["head.w"] = self.head.w
        out["head.b"] = self.head.b
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()

    def block(self, b: int) -> BlockWeights:
        if not 1 <= b <= len(self.blocks):
            raise PlacementError(f"block index {b} outside 1..{len(self.blocks)}")
        return self.blocks[b - 1]

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict) -> "BackboneWeights":
        blocks = []
        for b in range(1, config.L + 1):
            blocks.append(BlockWeights(**{f: tensors[f"backbone.block{b}.{f}"] for f in BlockWeights.FIELDS}))
        bb = cls(config, tensors["backbone.patch_proj"], blocks, Head(tensors["head.w"], tensors["head.b"]))
        validate_backbone(bb)
        return bb


def init_backbone(config: ModelConfig, seed: int = 0, ln_jitter: float = 0.1) -> BackboneWeights:
    """Seeded synthetic backbone; weight entries are N(0, 1/fan_in).

    Layer-norm gains are ``1 + ln_jitter * N(0,1)`` and biases ``ln_jitter * N(0,1)``.
    With ``ln_jitter=0`` every normalized token is orthogonal to the all-ones
    vector, which makes the projected second moment exactly singular.
    """
    rng = np.random.default_rng(seed)
    d, hid = config.d, config.d * config.mlp_ratio

    def gauss(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(rows)

    patch_proj = gauss(config.patch_dim, d)
    blocks = []
    for _ in range(config.L):
        blocks.append(BlockWeights(
            wq=gauss(d, d), wk=gauss(d, d), wv=gauss(d, d), wo=gauss(d, d),
            w1=gauss(d, hid), b1=np.zeros((1, hid)), w2=gauss(hid, d), b2=np.zeros((1, d)),
            ln1_g=1.0 + ln_jitter * rng.standard_normal((1, d)), ln1_b=ln_jitter * rng.standard_normal((1, d)),
            ln2_g=1.0 + ln_jitter * rng.standard_normal((1, d)), ln2_b=ln_jitter * rng.standard_normal((1, d)),
        ))
    head = Head(gauss(d, config.num_classes), np.zeros((1, config.num_classes)))
    return BackboneWeights(config, patch_proj, blocks, head)


def validate_backbone(bb: BackboneWeights):
    c = bb.config
    d, hid = c.d, c.d * c.mlp_ratio
    expect = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, hid), "b1": (1, hid),
              "w2": (hid, d), "b2": (1, d), "ln1_g": (1, d), "ln1_b": (1, d), "ln2_g": (1, d), "ln2_b": (1, d)}
    if bb.patch_proj.shape != (c.patch_dim, d):
        raise ShapeError(f"patch_proj has shape {bb.patch_proj.shape}, expected {(c.patch_dim, d)}")
    if len(bb.blocks) != c.L:
        raise ShapeError(f"{len(bb.blocks)} blocks for L={c.L}")
    for i, blk in enumerate(bb.blocks, start=1):
        for f, shape in expect.items():
            if getattr(blk, f).shape != shape:
                raise ShapeError(f"block{i}.{f} has shape {getattr(blk, f).shape}, expected {shape}")
    if bb.head.w.shape != (d, c.num_classes) or bb.head.b.shape != (1, c.num_classes):
        raise ShapeError("head shape mismatch")


def patch_embed(patches: np.ndarray, backbone: BackboneWeights) -> np.ndarray:
    if patches.ndim != 2 or patches.shape[1] != backbone.patch_proj.shape[0]:
        raise ShapeError(f"patches of shape {patches.shape} do not fit projector {backbone.patch_proj.shape}")
    return patches @ backbone.patch_proj


# -- tape-level building blocks ----------------------------------------------

class BlockNodes:
    """Constant tape nodes for one block's frozen weights (created once per tape)."""

    def __init__(self, tape: Tape, blk: BlockWeights):
        for f in BlockWeights.FIELDS:
            setattr(self, f, tape.const(getattr(blk, f)))


def attention(tape: Tape, x, blk: BlockNodes, config: ModelConfig, probe: dict | None = None):
    """Pre-norm multi-head self-attention sublayer with residual: ``x + MHSA(LN(x))``.

    When ``probe`` is a dict it receives the normalized rows and the per-head
    scaled score matrices (before softmax).
    """
    if x.shape[1] != config.d:
        raise ShapeError(f"tokens have width {x.shape[1]}, expected d={config.d}")
    hn = tape.layer_norm_rows(x, blk.ln1_g, blk.ln1_b)
    q = tape.matmul(hn, blk.wq)
    k = tape.matmul(hn, blk.wk)
    v = tape.matmul(hn, blk.wv)
    dk = config.d_k
    heads = []
    if probe is not None:
        probe["normed"] = hn.value
        probe["scores"] = []
        probe["attn"] = []
    for i in range(config.h):
        lo, hi = i * dk, (i + 1) * dk
        qi = tape.slice_cols(q, lo, hi) if config.h > 1 else q
        ki = tape.slice_cols(k, lo, hi) if config.h > 1 else k
        vi = tape.slice_cols(v, lo, hi) if config.h > 1 else v
        scores = tape.scale(tape.matmul(qi, tape.transpose(ki)), 1.0 / math.sqrt(dk))
        a = tape.softmax_rows(scores)
        if probe is not None:
            probe["scores"].append(scores.value)
            probe["attn"].append(a.value)
        heads.append(tape.matmul(a, vi))
    cat = heads[0] if len(heads) == 1 else tape.concat_cols(*heads)
    return tape.add(x, tape.matmul(cat, blk.wo))


def mlp(tape: Tape, x, blk: BlockNodes):
    hn = tape.layer_norm_rows(x, blk.ln2_g, blk.ln2_b)
    hid = tape.gelu(tape.add(tape.matmul(hn, blk.w1), blk.b1))
    return tape.add(x, tape.add(tape.matmul(hid, blk.w2), blk.b2))


def transformer_block(tape: Tape, x, blk: BlockNodes, config: ModelConfig, probe: dict | None = None):
    return mlp(tape, attention(tape, x, blk, config, probe), blk)


def attention_block(tokens: np.ndarray, blk: BlockWeights, config: ModelConfig) -> np.ndarray:
    """Value-only convenience wrapper around one full transformer block."""
    tape = Tape()
    return transformer_block(tape, tape.const(tokens), BlockNodes(tape, blk), config).value


def forward_tape(tape: Tape, tokens, backbone: BackboneWeights, prompt_for=None, head=None,
                 stop_before: int | None = None, probes: dict | None = None):
    """Run the blocks on an already-embedded token node and return the logits node.

    ``prompt_for(b)`` returns the effective prompt node for block ``b`` (1-based)
    or ``None``. A prompted block drops the prompt rows carried from earlier
    blocks and prepends its own. ``stop_before=b`` returns the token node
    entering block ``b`` instead of logits.
    """
    config = backbone.config
    m_cur = 0
    x = tokens
    for b in range(1, config.L + 1):
        p = prompt_for(b) if prompt_for is not None else None
        if p is not None:
            if p.shape[1] != config.d:
                raise ShapeError(f"prompt for block {b} has width {p.shape[1]}, expected {config.d}")
            body = tape.slice_rows(x, m_cur, x.shape[0]) if m_cur else x
            x = tape.concat_rows(p, body) if p.shape[0] else body
            m_cur = p.shape[0]
        if stop_before == b:
            return x, m_cur
        probe = None
        if probes is not None:
            probe = probes.setdefault(b, {})
            probe["m"] = m_cur
        x = transformer_block(tape, x, BlockNodes(tape, backbone.blocks[b - 1]), config, probe)
    if head is None:
        head = (tape.const(backbone.head.w), tape.const(backbone.head.b))
    pooled = tape.mean_rows(x)
    return tape.add(tape.matmul(pooled, head[0]), head[1])


def embed_node(tape: Tape, sample, backbone: BackboneWeights, embedded: bool = False):
    """Token node for one sample: raw patches go through the patch projector."""
    sample = np.asarray(sample, dtype=np.float64)
    if embedded:
        if sample.ndim != 2 or sample.shape[1] != backbone.config.d:
            raise ShapeError(f"embedded tokens of shape {sample.shape} do not match d={backbone.config.d}")
        return tape.const(sample)
    return tape.matmul(tape.const(sample), tape.const(backbone.patch_proj))


def check_placement(placement, L):
    for b in placement:
        if not 1 <= b <= L:
            raise PlacementError(f"placement references block {b}, model has blocks 1..{L}")


def forward(sample, backbone: BackboneWeights, method=None, head: Head | None = None,
            embedded: bool = False, probes: dict | None = None) -> np.ndarray:
    """Logits (1 x num_classes) for one sample.

    ``method`` is any object with ``placement`` and ``bind(tape)`` (see
    ``bpt.prompts.PromptMethod``); ``None`` runs the plain backbone.
    """
    tape = Tape()
    prompt_for = None
    if method is not None:
        check_placement(method.placement, backbone.config.L)
        prompt_for = method.bind(tape)
    hn = None if head is None else (tape.const(head.w), tape.const(head.b))
    x = embed_node(tape, sample, backbone, embedded)
    return forward_tape(tape, x, backbone, prompt_for, hn, probes=probes).value
