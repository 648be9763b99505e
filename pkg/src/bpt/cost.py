"""Learnable-parameter and prompt-path multiplication counts.

Parameters exclude the task head and frozen tensors. Multiplications count
only the product of the effective prompt with the projected data
``Xt`` (d x n) at each prompted block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .prompts import PromptConfig, effective_prompt


@dataclass(frozen=True)
class CostReport:
    kind: str
    params: int
    mults_prompt_path: int
    m: int
    d: int
    n: int
    p: int | None
    blocks: int
    folded: bool = False

    @property
    def params_1e2m(self) -> float:
        """Parameter count in units of 10^-2 M (i.e. 10^4)."""
        return self.params / 1e4

    def record(self) -> dict:
        return {"kind": self.kind, "params": self.params, "params_1e-2M": round(self.params_1e2m, 2),
                "mults_prompt_path": self.mults_prompt_path, "m": self.m, "d": self.d, "n": self.n,
                "p": self.p, "blocks": self.blocks, "folded": self.folded}


def param_count(prompt: PromptConfig, model) -> int:
    k = len(prompt.blocks(model.L))
    m, d = prompt.m, model.d
    if prompt.kind in ("vpt", "fwhiten"):
        return k * m * d
    if prompt.kind == "twhiten":
        return k * (m * d + d * d)
    return k * (m * prompt.p + d * prompt.p)


def mult_count(prompt: PromptConfig, model, folded: bool = False) -> CostReport:
    k = len(prompt.blocks(model.L))
    m, d, n = prompt.m, model.d, model.n
    if folded or prompt.kind == "vpt" or m == 0:
        per_block = m * d * n
    elif prompt.kind == "bilinear":
        per_block = (m * prompt.p + prompt.p * d) * n
    else:
        per_block = (m * d + d * d) * n
    return CostReport(prompt.kind, param_count(prompt, model), k * per_block, m, d, n, prompt.p, k, folded)


def vpt_baseline(prompt: PromptConfig, model) -> CostReport:
    return mult_count(PromptConfig("vpt", prompt.m, None, prompt.placement, prompt.depth), model)


def bilinear_saves(m: int, d: int, p: int) -> bool:
    """Whether ``(mp + pd) < md``, i.e. ``p < md / (m + d)``."""
    return p * (m + d) < m * d


class CountingMatmul:
    """Schoolbook matrix product that counts every scalar multiplication it performs."""

    def __init__(self):
        self.count = 0

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        rows, inner = a.shape
        inner2, cols = b.shape
        if inner != inner2:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
        out = np.zeros((rows, cols))
        for i in range(rows):
            for j in range(cols):
                acc = 0.0
                for k in range(inner):
                    acc += a[i, k] * b[k, j]
                    self.count += 1
                out[i, j] = acc
        return out


def prompt_path_product(state, block: int, xt: np.ndarray, mm, folded: bool = False) -> np.ndarray:
    """Effective prompt times ``xt`` evaluated factor by factor (right to left)."""
    t = state.params[block]
    if folded or state.kind == "vpt":
        return mm(effective_prompt(state, block), xt)
    if state.kind == "bilinear":
        return mm(t["A"], mm(np.ascontiguousarray(t["B"].T), xt))
    return mm(t["P"], mm(np.ascontiguousarray(t["W"].T), xt))


def empirical_mult_count(state, xts: dict, folded: bool = False) -> int:
    """Multiplications actually executed on the prompt path for ``xts[block]`` (d x n each)."""
    mm = CountingMatmul()
    for b in state.placement:
        if state.m == 0:
            continue
        out = prompt_path_product(state, b, xts[b], mm, folded)
        ref = effective_prompt(state, b) @ xts[b]
        if not np.allclose(out, ref, rtol=1e-9, atol=1e-12):
            raise ArithmeticError(f"counted product disagrees with the reference at block {b}")
    return mm.count
