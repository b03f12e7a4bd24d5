"""The alignment loss and its gradient contract.

Three terms: squared Frobenius distance between residual covariances, pooled
one-dimensional earth-mover distance between residual value distributions
(quantile matching), and a mean-squared realism penalty between the original
16-bit images and their developed counterparts. Each term is divided by its
value on the first batch seen, so the weights start on comparable scales.

Gradients are central finite differences of a caller-supplied loss closure.
With only a handful of free parameters this is cheap, it is exact on
quadratics, and it sidesteps the fact that the cubic rounding surrogate is
only piecewise smooth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, ImageError, TrainingError
from .residual import PatchSet

_NORMALIZER_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_cov: float = 1.0
    mu_dist: float = 1.0
    gamma_real: float = 1.0
    normalizers: tuple[float, float, float] | None = None

    @property
    def frozen(self) -> bool:
        return self.normalizers is not None

    def freeze(self, raw_cov: float, raw_w1: float, raw_realism: float) -> None:
        if self.frozen:
            raise TrainingError("loss normalizers are already frozen")
        self.normalizers = (
            max(raw_cov, _NORMALIZER_FLOOR),
            max(raw_w1, _NORMALIZER_FLOOR),
            max(raw_realism, _NORMALIZER_FLOOR),
        )


@dataclass
class CovStats:
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d), symmetric
    n: int


@dataclass
class LossBreakdown:
    cov_term: float
    w1_term: float
    realism_term: float
    raw_cov: float
    raw_w1: float
    raw_realism: float

    def as_dict(self) -> dict:
        return {
            "cov_term": self.cov_term,
            "w1_term": self.w1_term,
            "realism_term": self.realism_term,
            "raw_cov": self.raw_cov,
            "raw_w1": self.raw_w1,
            "raw_realism": self.raw_realism,
        }


def _patch_matrix(patches) -> np.ndarray:
    if isinstance(patches, PatchSet):
        return patches.values
    return np.asarray(patches, dtype=np.float64)


def cov_stats(patches) -> CovStats:
    """Sample mean and unbiased covariance of patch vectors."""
    x = _patch_matrix(patches)
    n = x.shape[0]
    if n < 2:
        raise TrainingError(f"covariance needs at least 2 patches, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return CovStats(mean=mean, cov=cov, n=n)


def cov_loss(src: CovStats, tgt: CovStats) -> float:
    if src.cov.shape != tgt.cov.shape:
        raise ImageError("covariance dimensions differ")
    diff = src.cov - tgt.cov
    return float(np.sum(diff * diff))


def w1_sorted(src_sorted: np.ndarray, tgt_sorted: np.ndarray) -> float:
    """Pooled 1-D W1 between two pre-sorted sample vectors.

    m = min(len) midpoint quantile levels, each read off the empirical
    quantile function (floor index), mean absolute difference.
    """
    ns, nt = src_sorted.size, tgt_sorted.size
    if ns == 0 or nt == 0:
        raise TrainingError("W1 needs nonempty sample sets")
    m = min(ns, nt)
    levels = (np.arange(m) + 0.5) / m
    qs = src_sorted[np.minimum((levels * ns).astype(np.int64), ns - 1)]
    qt = tgt_sorted[np.minimum((levels * nt).astype(np.int64), nt - 1)]
    return float(np.mean(np.abs(qs - qt)))


def w1_loss(src, tgt) -> float:
    """Earth-mover distance between the pooled residual values of two patch sets."""
    a = np.sort(_patch_matrix(src).reshape(-1))
    b = np.sort(_patch_matrix(tgt).reshape(-1))
    return w1_sorted(a, b)


def _image_stack(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch.astype(np.float64, copy=False)
    return np.stack([img.data for img in batch])


def realism_loss(tif_batch, developed) -> float:
    """Mean squared difference between 16-bit originals (normalized by 65535)
    and developed 8-bit-scale images (normalized by 255)."""
    t = _image_stack(tif_batch) / 65535.0
    d = _image_stack(developed) / 255.0
    if t.shape != d.shape:
        raise ImageError(f"batch shapes differ: {t.shape} vs {d.shape}")
    diff = t - d
    return float(np.mean(diff * diff))


def total_loss(
    src_patches, tgt_patches, tif_batch, developed, weights: LossWeights
) -> tuple[float, LossBreakdown]:
    """Weighted, first-batch-normalized sum of the three terms.

    On the first evaluation (normalizers not yet frozen) the normalizers are
    frozen from the raw term values, so the total is exactly
    lambda + mu + gamma whenever every raw term exceeds the floor.
    """
    raw_cov = cov_loss(cov_stats(src_patches), cov_stats(tgt_patches))
    raw_w1 = w1_loss(src_patches, tgt_patches)
    raw_realism = realism_loss(tif_batch, developed)
    return combine_terms(raw_cov, raw_w1, raw_realism, weights)


def combine_terms(
    raw_cov: float, raw_w1: float, raw_realism: float, weights: LossWeights
) -> tuple[float, LossBreakdown]:
    if not weights.frozen:
        weights.freeze(raw_cov, raw_w1, raw_realism)
    n_cov, n_w1, n_real = weights.normalizers
    breakdown = LossBreakdown(
        cov_term=weights.lambda_cov * raw_cov / n_cov,
        w1_term=weights.mu_dist * raw_w1 / n_w1,
        realism_term=weights.gamma_real * raw_realism / n_real,
        raw_cov=raw_cov,
        raw_w1=raw_w1,
        raw_realism=raw_realism,
    )
    total = breakdown.cov_term + breakdown.w1_term + breakdown.realism_term
    return total, breakdown


def _closure_value(result, where: str) -> float:
    """Accept closures returning a float or a (float, LossBreakdown) pair."""
    breakdown = None
    if isinstance(result, tuple):
        result, breakdown = result
    value = float(result)
    if not np.isfinite(value):
        term = "total"
        if breakdown is not None:
            for name, v in breakdown.as_dict().items():
                if not np.isfinite(v):
                    term = name
                    break
        raise GradientError(f"non-finite loss ({term}) at {where}")
    return value


def loss_gradient(params: np.ndarray, closure, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar loss closure.

    Uses `closure.evaluate_many(points)` when the closure provides it (one
    vectorized pass over all probe points), otherwise calls the closure once
    per probe. Exact on quadratic closures; deterministic.
    """
    params = np.asarray(params, dtype=np.float64)
    n = params.size
    probes = np.repeat(params[None, :], 2 * n, axis=0)
    for i in range(n):
        probes[2 * i, i] += step
        probes[2 * i + 1, i] -= step
    if hasattr(closure, "evaluate_many"):
        values = closure.evaluate_many(probes)
        values = [
            _closure_value(v, f"probe {i // 2} ({'+' if i % 2 == 0 else '-'})")
            for i, v in enumerate(values)
        ]
    else:
        values = [
            _closure_value(closure(p), f"probe {i // 2} ({'+' if i % 2 == 0 else '-'})")
            for i, p in enumerate(probes)
        ]
    grad = np.empty(n)
    for i in range(n):
        grad[i] = (values[2 * i] - values[2 * i + 1]) / (2.0 * step)
    return grad
