"""Value-distribution measurements: histograms, kurtosis, generalized-Gaussian fits.

The generalized Gaussian has density proportional to ``exp(-|x/alpha|^beta)``;
beta=2 is Gaussian, beta=1 Laplacian and beta<1 hyper-Laplacian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSampleError, FitError
from .linalg import inv_sqrt_psd
from .prompts import effective_prompt
from .whitening import block_inputs, covariance, project_embeddings, qk_product

BETA_LO, BETA_HI = 0.1, 10.0
BURST_THRESHOLD = 10.0


def excess_kurtosis(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 4:
        raise DegenerateSampleError(f"excess kurtosis needs at least 4 values, got {x.size}")
    xc = x - x.mean()
    m2 = np.mean(xc * xc)
    if not m2 > 0.0:
        raise DegenerateSampleError("excess kurtosis undefined for zero-variance data")
    return float(np.mean(xc ** 4) / (m2 * m2) - 3.0)


def gg_moment_ratio(beta: float) -> float:
    """``Gamma(2/b)^2 / (Gamma(1/b) Gamma(3/b))``, i.e. E|x|^2 / E[x^2] for shape b."""
    return math.exp(2.0 * math.lgamma(2.0 / beta) - math.lgamma(1.0 / beta) - math.lgamma(3.0 / beta))


def fit_generalized_gaussian(values, tol: float = 1e-6) -> tuple:
    """Moment-ratio fit of (beta, alpha), bisecting beta on [0.1, 10]."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 100:
        raise DegenerateSampleError(f"generalized-Gaussian fit needs at least 100 values, got {x.size}")
    if np.all(x == x[0]):
        raise DegenerateSampleError("generalized-Gaussian fit undefined for constant data")
    m1 = float(np.mean(np.abs(x)))
    m2 = float(np.mean(x * x))
    ratio = m1 * m1 / m2
    lo, hi = BETA_LO, BETA_HI
    r_lo, r_hi = gg_moment_ratio(lo), gg_moment_ratio(hi)
    if not r_lo <= ratio <= r_hi:
        raise FitError(f"moment ratio {ratio:.6f} outside attainable range [{r_lo:.6f}, {r_hi:.6f}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gg_moment_ratio(mid) < ratio:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    alpha = m1 * math.exp(math.lgamma(1.0 / beta) - math.lgamma(2.0 / beta))
    return beta, alpha


def histogram(values, bins: int, range: tuple | None = None) -> list:
    """Uniform-width bins as ``(left_edge, count)`` pairs; outliers go to the edge bins."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    x = np.asarray(values, dtype=np.float64).ravel()
    if range is None:
        lo, hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    else:
        lo, hi = map(float, range)
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    width = (hi - lo) / bins
    idx = np.clip(np.floor((x - lo) / width).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return [(lo + i * width, int(c)) for i, c in enumerate(counts)]


@dataclass
class BurstinessReport:
    name: str
    count: int
    min: float
    max: float
    mean: float
    std: float
    excess_kurtosis: float
    gg_beta: float
    gg_alpha: float
    top_fraction: float
    histogram: list = field(repr=False)

    def record(self) -> dict:
        d = dict(self.__dict__)
        d.pop("histogram")
        return d

    def histogram_csv(self) -> str:
        return "".join(f"{left!r},{c}\n" for left, c in self.histogram)


def burstiness_report(tensor, name: str, bins: int = 50, threshold: float = BURST_THRESHOLD) -> BurstinessReport:
    """Summary statistics for every entry of ``tensor``.

    ``top_fraction`` counts entries farther than ``threshold`` standard
    deviations from the mean. Kurtosis and the GG fit are NaN when the data
    is too small or degenerate for them.
    """
    x = np.asarray(tensor, dtype=np.float64).ravel()
    if x.size == 0:
        raise DegenerateSampleError(f"tensor {name!r} is empty")
    mean, std = float(x.mean()), float(x.std())
    try:
        kurt = excess_kurtosis(x)
    except DegenerateSampleError:
        kurt = float("nan")
    try:
        beta, alpha = fit_generalized_gaussian(x)
    except (DegenerateSampleError, FitError):
        beta = alpha = float("nan")
    top = float(np.mean(np.abs(x - mean) > threshold * std)) if std > 0 else 0.0
    return BurstinessReport(name, int(x.size), float(x.min()), float(x.max()), mean, std,
                            kurt, beta, alpha, top, histogram(x, bins))


def instrumented_probe(backbone, method, samples, block: int, bins: int = 50,
                       embedded: bool = False, eps: float | None = None) -> dict:
    """Reports for the tensors that meet the prompt at ``block``.

    Keys: ``qk`` (Wq Wk^T), ``x_raw`` (tokens entering the block), ``x``
    (the same after layer norm), ``qkx`` (Wq Wk^T X^T), ``qkx_whitened``
    (ZCA-whitened qkx, in-sample) and ``prompt`` (effective prompt, only when
    the block is prompted).
    """
    raw = block_inputs(backbone, block, samples, embedded=embedded, method=method, normalized=False)
    x = block_inputs(backbone, block, samples, embedded=embedded, method=method)
    xt = project_embeddings(backbone, block, x)
    white = inv_sqrt_psd(covariance(xt), eps) @ xt
    out = {
        "qk": burstiness_report(qk_product(backbone, block), "qk", bins),
        "x_raw": burstiness_report(raw, "x_raw", bins),
        "x": burstiness_report(x, "x", bins),
        "qkx": burstiness_report(xt, "qkx", bins),
        "qkx_whitened": burstiness_report(white, "qkx_whitened", bins),
    }
    if method is not None and block in method.params:
        out["prompt"] = burstiness_report(effective_prompt(method, block), "prompt", bins)
    return out
