"""Reverse-mode differentiation on a recorded tape of 2-D float64 ops.

A ``Tape`` is append-only: every op evaluates eagerly, caches its value and
remembers its parents, so nodes are always in topological order. ``backward``
walks the tape in reverse and returns one gradient per trainable leaf.

Backward rules live in ``BACKWARD_RULES`` keyed by op kind. Each rule receives
the node, the upstream gradient and the parent values and returns one gradient
per parent (``None`` when a parent needs none).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-6


@dataclass(eq=False)
class Node:
    tape: "Tape"
    index: int
    kind: str
    parents: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    trainable: bool = False
    grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape


@dataclass
class GradRecord:
    grads: dict
    step: int = 0

    def __getitem__(self, key):
        return self.grads[key]


# -- forward helpers ---------------------------------------------------------

def softmax_rows(x):
    z = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def layer_norm_rows(x, gamma, beta, eps=LN_EPS):
    mu = np.mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return xhat * gamma + beta


# -- tape --------------------------------------------------------------------

class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, kind, parents, value, **attrs):
        node = Node(self, len(self.nodes), kind, tuple(parents), value, attrs)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None, trainable=False) -> Node:
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"leaf {name!r} must be 2-D, got shape {value.shape}")
        node = self._append("leaf", (), value)
        node.name = name
        node.trainable = trainable
        return node

    def const(self, value, name=None) -> Node:
        return self.leaf(value, name=name, trainable=False)

    def record(self, kind, *inputs, **attrs) -> Node:
        try:
            fwd = FORWARD_RULES[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        for x in inputs:
            if x.tape is not self:
                raise ValueError("input node belongs to a different tape")
        value = fwd(*(x.value for x in inputs), **attrs)
        return self._append(kind, inputs, value, **attrs)

    # thin sugar so model code reads naturally
    def matmul(self, a, b): return self.record("matmul", a, b)
    def add(self, a, b): return self.record("add", a, b)
    def mul(self, a, b): return self.record("mul", a, b)
    def scale(self, a, c): return self.record("scale", a, c=float(c))
    def transpose(self, a): return self.record("transpose", a)
    def concat_rows(self, *xs): return self.record("concat_rows", *xs)
    def concat_cols(self, *xs): return self.record("concat_cols", *xs)
    def slice_rows(self, a, start, stop): return self.record("slice_rows", a, start=start, stop=stop)
    def slice_cols(self, a, start, stop): return self.record("slice_cols", a, start=start, stop=stop)
    def softmax_rows(self, a): return self.record("softmax_rows", a)
    def gelu(self, a): return self.record("gelu", a)
    def layer_norm_rows(self, x, gamma, beta): return self.record("layer_norm_rows", x, gamma, beta)
    def mean_rows(self, a): return self.record("mean_rows", a)
    def sum(self, a): return self.record("sum", a)
    def cross_entropy(self, logits, labels): return self.record("cross_entropy", logits, labels=tuple(int(y) for y in labels))

    def trainable_leaves(self):
        return [n for n in self.nodes if n.kind == "leaf" and n.trainable]

    def zero_grad(self):
        for n in self.trainable_leaves():
            n.grad = None

    def backward(self, loss: Node, step: int = 0) -> GradRecord:
        """Gradients of scalar ``loss`` for every trainable leaf.

        Returned gradients are fresh arrays; they are also accumulated into
        ``leaf.grad`` (callers zero between steps).
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        adj = [None] * (loss.index + 1)
        adj[loss.index] = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj[node.index]
            if g is None or node.kind == "leaf":
                continue
            pgrads = BACKWARD_RULES[node.kind](node, g, *(p.value for p in node.parents))
            for parent, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"backward rule for {node.kind} produced {pg.shape}, expected {parent.shape}")
                if adj[parent.index] is None:
                    adj[parent.index] = pg.copy()
                else:
                    adj[parent.index] += pg
        out = {}
        for leaf in self.trainable_leaves():
            g = adj[leaf.index] if leaf.index < len(adj) else None
            g = np.zeros_like(leaf.value) if g is None else g
            key = leaf.name if leaf.name is not None else leaf.index
            out[key] = g
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return GradRecord(out, step)


# -- forward rules -----------------------------------------------------------

def _fwd_matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _fwd_add(a, b):
    # b may be a 1-row bias broadcast over rows
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return a + b


def _fwd_mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return a * b


def _fwd_concat_rows(*xs):
    if len({x.shape[1] for x in xs}) != 1:
        raise ShapeError("concat_rows needs equal column counts")
    return np.concatenate(xs, axis=0)


def _fwd_concat_cols(*xs):
    if len({x.shape[0] for x in xs}) != 1:
        raise ShapeError("concat_cols needs equal row counts")
    return np.concatenate(xs, axis=1)


def _fwd_slice_rows(a, start, stop):
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    return a[start:stop].copy()


def _fwd_slice_cols(a, start, stop):
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")
    return a[:, start:stop].copy()


def _fwd_layer_norm(x, gamma, beta):
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError("layer norm affine parameters must be 1 x d")
    return layer_norm_rows(x, gamma, beta)


def _fwd_cross_entropy(logits, labels):
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {logits.shape[0]} logit rows")
    if any(not 0 <= y < logits.shape[1] for y in labels):
        raise ValueError("label out of range")
    z = logits - np.max(logits, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return np.array([[-np.mean(logp[np.arange(len(labels)), list(labels)])]])


FORWARD_RULES = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "scale": lambda a, c: a * c,
    "transpose": lambda a: np.ascontiguousarray(a.T),
    "concat_rows": _fwd_concat_rows,
    "concat_cols": _fwd_concat_cols,
    "slice_rows": _fwd_slice_rows,
    "slice_cols": _fwd_slice_cols,
    "softmax_rows": softmax_rows,
    "gelu": gelu,
    "layer_norm_rows": _fwd_layer_norm,
    "mean_rows": lambda a: np.mean(a, axis=0, keepdims=True),
    "sum": lambda a: np.array([[np.sum(a)]]),
    "cross_entropy": _fwd_cross_entropy,
}


# -- backward rules ----------------------------------------------------------

def _bwd_add(node, g, a, b):
    gb = g if b.shape == g.shape else np.sum(g, axis=0, keepdims=True)
    return g, gb


def _bwd_concat_rows(node, g, *xs):
    out, r = [], 0
    for x in xs:
        out.append(g[r:r + x.shape[0]])
        r += x.shape[0]
    return out


def _bwd_concat_cols(node, g, *xs):
    out, c = [], 0
    for x in xs:
        out.append(g[:, c:c + x.shape[1]])
        c += x.shape[1]
    return out


def _bwd_slice_rows(node, g, a):
    out = np.zeros_like(a)
    out[node.attrs["start"]:node.attrs["stop"]] = g
    return (out,)


def _bwd_slice_cols(node, g, a):
    out = np.zeros_like(a)
    out[:, node.attrs["start"]:node.attrs["stop"]] = g
    return (out,)


def _bwd_softmax_rows(node, g, a):
    s = node.value
    return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)


def _bwd_layer_norm(node, g, x, gamma, beta):
    d = x.shape[1]
    mu = np.mean(x, axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    gxhat = g * gamma
    gx = inv / d * (d * gxhat - np.sum(gxhat, axis=1, keepdims=True)
                    - xhat * np.sum(gxhat * xhat, axis=1, keepdims=True))
    return gx, np.sum(g * xhat, axis=0, keepdims=True), np.sum(g, axis=0, keepdims=True)


def _bwd_cross_entropy(node, g, logits):
    labels = list(node.attrs["labels"])
    p = softmax_rows(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return (g[0, 0] * p / len(labels),)


BACKWARD_RULES = {
    "matmul": lambda node, g, a, b: (g @ b.T, a.T @ g),
    "add": _bwd_add,
    "mul": lambda node, g, a, b: (g * b, g * a),
    "scale": lambda node, g, a: (g * node.attrs["c"],),
    "transpose": lambda node, g, a: (np.ascontiguousarray(g.T),),
    "concat_rows": _bwd_concat_rows,
    "concat_cols": _bwd_concat_cols,
    "slice_rows": _bwd_slice_rows,
    "slice_cols": _bwd_slice_cols,
    "softmax_rows": _bwd_softmax_rows,
    "gelu": lambda node, g, a: (g * gelu_grad(a),),
    "layer_norm_rows": _bwd_layer_norm,
    "mean_rows": lambda node, g, a: (np.broadcast_to(g / a.shape[0], a.shape).copy(),),
    "sum": lambda node, g, a: (np.full(a.shape, g[0, 0]),),
    "cross_entropy": _bwd_cross_entropy,
}
