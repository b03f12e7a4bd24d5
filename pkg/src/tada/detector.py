"""Steganalysis evaluation: DCT-residual features, a deterministic logistic
detector, minimum-average-error rates, and the regret metrics built on them.

Feature construction: decompress without the final clamp, level-shift, filter
with the 64 (or the 16 lowest-frequency) 8x8 DCT basis kernels in valid mode,
quantize and truncate magnitudes, then histogram per (basis, grid phase) with
mirror-symmetric phases merged (25 classes), each histogram normalized. A
spec_id string derived from the configuration guards against pairing features
built under different settings.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DetectorError,
    ExactModeError,
    FeatureSpecError,
    ImageError,
    RankError,
)
from .jpegdiff import JpegPlane, SCHEME_EXACT, decompress_coeffs, round_half_away, _DCT
from .util import worker_count

_N_PHASE_CLASSES = 25


@dataclass
class FeatureConfig:
    q_quant: float | None = None  # None: mean quantization step / 4
    t_trunc: int = 4
    reduced: bool = True  # 16 lowest-frequency bases instead of all 64

    def effective_q(self, table_q: np.ndarray) -> float:
        if self.q_quant is not None:
            return float(self.q_quant)
        return float(np.mean(table_q)) / 4.0

    def spec_id(self, table_q: np.ndarray) -> str:
        basis = "r16" if self.reduced else "f64"
        return f"dctr-{basis}-T{self.t_trunc}-q{self.effective_q(table_q):.9g}"


@dataclass
class FeatureVector:
    values: np.ndarray
    spec_id: str


@dataclass
class Detector:
    weights: np.ndarray  # in standardized feature space
    bias: float
    spec_id: str
    feature_mean: np.ndarray
    feature_std: np.ndarray
    train_meta: dict = field(default_factory=dict)


@dataclass
class RegretReport:
    pe_source_on_target: float
    pe_target_on_target: float  # intrinsic difficulty of the target
    regret: float

    def as_dict(self) -> dict:
        return {
            "pe_source_on_target": self.pe_source_on_target,
            "pe_target_on_target": self.pe_target_on_target,
            "regret": self.regret,
        }


def _basis_filters(reduced: bool) -> np.ndarray:
    if reduced:
        pairs = [(k, l) for k in range(4) for l in range(4)]
    else:
        pairs = [(k, l) for k in range(8) for l in range(8)]
    return np.stack([np.outer(_DCT[k], _DCT[l]) for k, l in pairs])


def _phase_class_map(hv: int, wv: int) -> np.ndarray:
    a = np.arange(hv) % 8
    b = np.arange(wv) % 8
    pa = np.minimum(a, (8 - a) % 8)
    pb = np.minimum(b, (8 - b) % 8)
    return pa[:, None] * 5 + pb[None, :]


def dctr_features(plane: JpegPlane, cfg: FeatureConfig) -> FeatureVector:
    """Histogram features of quantized DCT-basis residuals.

    Residual maps are computed on level-shifted pixels, so a constant plane
    puts all histogram mass in the zero bin for every basis including DC.
    """
    if plane.mode != SCHEME_EXACT:
        raise ExactModeError("features need an exact plane")
    q_eff = cfg.effective_q(plane.table.q)
    pixels = decompress_coeffs(plane.coeffs, plane.table.q, clamp=False) - 128.0
    bases = _basis_filters(cfg.reduced)
    n_bases = bases.shape[0]
    windows = sliding_window_view(pixels, (8, 8))  # (Hv, Wv, 8, 8)
    hv, wv = windows.shape[:2]
    flat = windows.reshape(hv * wv, 64)
    resp = flat @ bases.reshape(n_bases, 64).T  # (Hv*Wv, n_bases)
    qmaps = np.minimum(round_half_away(np.abs(resp) / q_eff), cfg.t_trunc)
    qmaps = qmaps.astype(np.int64).reshape(hv, wv, n_bases)
    phase = _phase_class_map(hv, wv)
    n_bins = cfg.t_trunc + 1
    idx = (
        np.arange(n_bases)[None, None, :] * (_N_PHASE_CLASSES * n_bins)
        + phase[:, :, None] * n_bins
        + qmaps
    )
    counts = np.bincount(
        idx.reshape(-1), minlength=n_bases * _N_PHASE_CLASSES * n_bins
    ).astype(np.float64)
    class_counts = np.bincount(phase.reshape(-1), minlength=_N_PHASE_CLASSES).astype(
        np.float64
    )
    counts = counts.reshape(n_bases, _N_PHASE_CLASSES, n_bins)
    counts /= class_counts[None, :, None]
    return FeatureVector(values=counts.reshape(-1), spec_id=cfg.spec_id(plane.table.q))


def features_for_planes(planes, cfg: FeatureConfig) -> list[FeatureVector]:
    """Extract features for many planes; order-preserving, optionally threaded
    (TADA_THREADS caps the pool size)."""
    workers = worker_count()
    if workers <= 1 or len(planes) < 4:
        return [dctr_features(p, cfg) for p in planes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: dctr_features(p, cfg), planes))


def stack_features(features) -> tuple[np.ndarray, str]:
    if not features:
        raise DetectorError("no feature vectors given")
    spec = features[0].spec_id
    for f in features[1:]:
        if f.spec_id != spec:
            raise FeatureSpecError(f"mixed feature specs: {spec} vs {f.spec_id}")
    return np.stack([f.values for f in features]), spec


@dataclass
class BenchmarkFeatures:
    """Labeled train/eval splits of one cover-stego dataset, as features."""

    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    spec_id: str


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_detector(
    features,
    labels,
    reg: float = 1e-3,
    iters: int = 500,
    lr: float = 0.5,
    train_meta: dict | None = None,
) -> Detector:
    """L2-regularized logistic regression by full-batch gradient descent from
    zero init on standardized features. Deterministic; label-antisymmetric."""
    x, spec = stack_features(features) if not isinstance(features, np.ndarray) else (
        features,
        "raw",
    )
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[0] != y.size:
        raise DetectorError("feature/label count mismatch")
    classes = np.unique(y)
    if classes.size != 2 or set(classes) != {0.0, 1.0}:
        raise DetectorError("need both classes labeled 0 (cover) and 1 (stego)")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std
    n = xs.shape[0]
    w = np.zeros(xs.shape[1])
    b = 0.0
    for _ in range(iters):
        margin = xs @ w + b
        err = _sigmoid(margin) - y
        w = w - lr * (xs.T @ err / n + reg * w)
        b = b - lr * float(err.mean())
    return Detector(
        weights=w,
        bias=b,
        spec_id=spec,
        feature_mean=mean,
        feature_std=std,
        train_meta=train_meta or {},
    )


def detector_scores(detector: Detector, features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = features
    else:
        x, spec = stack_features(features)
        if spec != detector.spec_id:
            raise FeatureSpecError(
                f"detector built on {detector.spec_id}, features are {spec}"
            )
    xs = (x - detector.feature_mean) / detector.feature_std
    return xs @ detector.weights + detector.bias


def min_average_error(scores: np.ndarray, labels: np.ndarray) -> float:
    """Min over thresholds (and both orientations) of (P_FA + P_MD) / 2."""
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if np.unique(y).size != 2:
        raise DetectorError("need both classes to evaluate an error rate")
    order = np.argsort(s, kind="stable")
    y_sorted = y[order]
    n1 = int(y.sum())
    n0 = y.size - n1
    # cut after position i (0..n): stego iff score beyond the cut
    stego_left = np.concatenate([[0], np.cumsum(y_sorted)])
    cover_left = np.arange(y.size + 1) - stego_left
    misses = stego_left / n1  # stegos at or below the cut
    false_alarms = (n0 - cover_left) / n0  # covers above the cut
    err_hi = 0.5 * (misses + false_alarms)
    err_lo = 1.0 - err_hi  # flipped orientation
    s_sorted = s[order]
    valid = np.ones(y.size + 1, dtype=bool)
    valid[1:-1] = s_sorted[1:] != s_sorted[:-1]  # cuts inside tied scores are not thresholds
    return float(np.minimum(err_hi, err_lo)[valid].min())


def probability_of_error(detector: Detector, features, labels) -> float:
    return min_average_error(detector_scores(detector, features), labels)


def regret(
    source: BenchmarkFeatures,
    target: BenchmarkFeatures,
    reg: float = 1e-3,
    iters: int = 500,
    lr: float = 0.5,
) -> RegretReport:
    """P_E of the source-trained detector on the target eval split, minus the
    target's intrinsic difficulty (its self-trained P_E on the same split)."""
    if source.spec_id != target.spec_id:
        raise FeatureSpecError("source and target features use different specs")
    det_src = train_detector(source.train_x, source.train_y, reg, iters, lr)
    det_tgt = train_detector(target.train_x, target.train_y, reg, iters, lr)
    pe_src = min_average_error(detector_scores(det_src, target.eval_x), target.eval_y)
    pe_tgt = min_average_error(detector_scores(det_tgt, target.eval_x), target.eval_y)
    return RegretReport(
        pe_source_on_target=pe_src,
        pe_target_on_target=pe_tgt,
        regret=pe_src - pe_tgt,
    )


def _principal_basis(x: np.ndarray, k: int) -> np.ndarray:
    if x.shape[0] <= k:
        raise RankError(f"{x.shape[0]} samples cannot support a {k}-dim subspace")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std
    _, s, vt = np.linalg.svd(xs, full_matrices=False)
    if s.size < k or s[k - 1] <= 1e-12 * s[0]:
        raise RankError(f"feature rank below requested subspace dimension {k}")
    return vt[:k]


def chordal_from_bases(u: np.ndarray, v: np.ndarray) -> float:
    k = u.shape[0]
    overlap = float(np.sum((u @ v.T) ** 2))
    return float(np.sqrt(max(k - overlap, 0.0)))


def chordal_diagnostic(src_x: np.ndarray, tgt_x: np.ndarray, k: int) -> float:
    """Chordal distance between the top-k principal subspaces of two
    standardized feature sets; in [0, sqrt(k)]."""
    return chordal_from_bases(_principal_basis(src_x, k), _principal_basis(tgt_x, k))
