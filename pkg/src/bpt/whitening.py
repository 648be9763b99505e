"""ZCA whitening of query/key-projected token embeddings.

For the tokens X (N x d, normalized as the probed block sees them) the
projected data is ``Xt = Wq Wk^T X^T`` (d x N). Its second moment
``(1/N) Xt Xt^T`` is inverted to the symmetric whitener ``W = Sigma^{-1/2}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, layer_norm_rows
from .errors import EmptySampleError, PlacementError, ShapeError
from .linalg import DEFAULT_EPS_RATIO, inv_sqrt_psd, sym_eig
from .model import embed_node, forward_tape


@dataclass
class WhiteningEstimate:
    sigma: np.ndarray
    W: np.ndarray
    sample_count: int
    eps: float
    block_index: int
    centered: bool = False


def qk_product(backbone, block: int) -> np.ndarray:
    """``Wq Wk^T`` for a block; with several heads this sums the per-head products."""
    blk = backbone.block(block)
    return blk.wq @ blk.wk.T


def project_embeddings(backbone, block: int, tokens: np.ndarray) -> np.ndarray:
    if tokens.ndim != 2 or tokens.shape[1] != backbone.config.d:
        raise ShapeError(f"tokens of shape {tokens.shape} do not match d={backbone.config.d}")
    blk = backbone.block(block)
    return blk.wq @ (blk.wk.T @ tokens.T)


def block_inputs(backbone, block: int, samples, embedded: bool = False, method=None,
                 normalized: bool = True) -> np.ndarray:
    """Token rows entering ``block`` for every sample, stacked in sample order.

    With ``normalized`` the block's first layer norm is applied, matching what
    the query/key projectors see in the real forward pass. Prompt rows (if a
    method is given) are excluded.
    """
    L = backbone.config.L
    if not 1 <= block <= L:
        raise PlacementError(f"block index {block} outside 1..{L}")
    rows = []
    for s in samples:
        tape = Tape()
        prompt_for = method.bind(tape) if method is not None else None
        x, m = forward_tape(tape, embed_node(tape, s, backbone, embedded), backbone, prompt_for, stop_before=block)
        t = x.value[m:]
        if normalized:
            blk = backbone.block(block)
            t = layer_norm_rows(t, blk.ln1_g, blk.ln1_b)
        rows.append(t)
    if not rows:
        raise EmptySampleError("no samples supplied")
    return np.concatenate(rows, axis=0)


def covariance(xt: np.ndarray, center: bool = False) -> np.ndarray:
    """``(1/N) xt xt^T`` over the N columns of ``xt``; no centering by default."""
    if xt.ndim != 2 or xt.shape[1] == 0:
        raise EmptySampleError("covariance needs at least one column")
    if center:
        xt = xt - xt.mean(axis=1, keepdims=True)
    s = (xt @ xt.T) / xt.shape[1]
    return (s + s.T) / 2.0


def zca(sigma: np.ndarray, eps: float | None = None) -> np.ndarray:
    return inv_sqrt_psd(sigma, eps)


def estimate(backbone, block: int, samples, eps: float | None = None, center: bool = False,
             embedded: bool = False) -> WhiteningEstimate:
    """Whitening matrix for ``block`` from the pooled tokens of ``samples``.

    ``eps=None`` resolves to ``1e-5`` times the largest eigenvalue of sigma.
    """
    tokens = block_inputs(backbone, block, samples, embedded=embedded)
    xt = project_embeddings(backbone, block, tokens)
    sigma = covariance(xt, center=center)
    if eps is None:
        eps = DEFAULT_EPS_RATIO * max(float(sym_eig(sigma).eigenvalues[0]), 0.0)
    return WhiteningEstimate(sigma, zca(sigma, eps), xt.shape[1], float(eps), block, center)


def estimate_blocks(backbone, blocks, samples, eps=None, center=False, embedded=False) -> dict:
    return {b: estimate(backbone, b, samples, eps, center, embedded) for b in blocks}


def retained_identity(sigma: np.ndarray, eps: float, keep_ratio: float = 1e3) -> np.ndarray:
    """Projector onto eigen-directions whose eigenvalue exceeds ``keep_ratio * eps``."""
    res = sym_eig(sigma)
    keep = res.eigenvalues > keep_ratio * eps
    u = res.eigenvectors[:, keep]
    return u @ u.T
