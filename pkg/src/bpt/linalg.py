"""Dense float64 linear algebra: products, Jacobi eigensolver, PSD inverse square root.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NotPSDError, ShapeError

MAX_SWEEPS = 100
OFFDIAG_RTOL = 1e-12
SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9
DEFAULT_EPS_RATIO = 1e-5


def as_matrix(x, name="matrix") -> np.ndarray:
    """Validate user input and return it as a finite 2-D float64 array."""
    a = np.array(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply a{a.shape} by b{b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns
    sweeps: int = 0


def _round_robin(d):
    """Yield the d-1 (or d) rounds of disjoint index pairs covering every pair once."""
    players = list(range(d)) + ([-1] if d % 2 else [])
    n = len(players)
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            yield np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])
        players = [players[0], players[-1]] + players[1:-1]


def _off_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eig(a: np.ndarray) -> SymEigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order, so the
    rotations within a round touch disjoint rows/columns and are applied together.
    Iterates until the off-diagonal Frobenius norm drops below
    ``1e-12 * ||a||_F`` or 100 sweeps elapse.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ShapeError("sym_eig needs a symmetric matrix")
    a = (a + a.T) / 2.0
    d = a.shape[0]
    v = np.eye(d)
    target = OFFDIAG_RTOL * np.linalg.norm(a)
    rounds = list(_round_robin(d))

    sweeps = 0
    while _off_norm(a) > target:
        if sweeps == MAX_SWEEPS:
            raise ConvergenceError(
                f"Jacobi did not converge in {MAX_SWEEPS} sweeps; off-diagonal residual {_off_norm(a):.3e}"
            )
        sweeps += 1
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J with J[p,p]=J[q,q]=c, J[p,q]=s, J[q,p]=-s; the pairs of a
            # round are disjoint, so one orthogonal J carries all of them
            j = np.eye(d)
            j[p, p] = c
            j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ j

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return SymEigResult(w[order], np.ascontiguousarray(v[:, order]), sweeps)


def inv_sqrt_psd(a: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Return ``U diag(1/sqrt(s + eps)) U^T`` for a symmetric PSD matrix.

    ``eps=None`` uses ``1e-5 * max(s)``. Eigenvalues in ``[-1e-9, 0)`` are
    clamped to zero; anything more negative is rejected.
    """
    res = sym_eig(a)
    s = res.eigenvalues
    scale = max(1.0, float(s[0])) if s.size else 1.0
    if s.size and s[-1] < -PSD_TOL * scale:
        raise NotPSDError(f"matrix is not positive semi-definite: smallest eigenvalue {s[-1]:.3e}")
    s = np.clip(s, 0.0, None)
    if eps is None:
        eps = DEFAULT_EPS_RATIO * float(s[0])
    if eps < 0:
        raise ValueError("eps must be non-negative")
    denom = s + eps
    if np.any(denom <= 0.0):
        raise NotPSDError("matrix is singular and eps=0; inverse square root undefined")
    u = res.eigenvectors
    w = (u / np.sqrt(denom)) @ u.T
    return (w + w.T) / 2.0


def default_eps(sigma: np.ndarray) -> float:
    return DEFAULT_EPS_RATIO * float(max(sym_eig(sigma).eigenvalues[0], 0.0))
