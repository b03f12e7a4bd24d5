"""Emulator training: batching, rotation augmentation, SGD with end-of-epoch
constraint projection, early stopping, and dataset emission.

The free parameter vector is the kernel's symmetry-class weights, extended by
three raw mixer weights when the source pool is RGB. Batches hold whole
images, pulled from the shuffled pool until the quota of selected patches
(std filter only on the source side) is met. Each gradient step differentiates
the batch loss via central finite differences; the sum-to-one projection runs
at epoch boundaries only, matching how the constraints are enforced.

The monitored quantity for early stopping is the loss of the full pool at the
epoch-end (projected) parameters. That makes the reported best loss exactly
recomputable from the returned parameters, which per-batch loss averages
(taken at moving parameters) would not be.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .emulator import (
    EmulatorPipeline,
    KERNEL_SIZES,
    SymmetricKernel,
    convolve_reflect,
    develop,
    identity_kernel,
    load_kernel,
    materialize_params,
    n_classes,
    save_kernel,
    symmetry_orbits,
)
from .errors import (
    DegenerateKernelError,
    HomogeneityError,
    ImageError,
    TrainingError,
)
from .imagecore import GrayImage, RgbImage
from .jpegdiff import (
    JpegPlane,
    QuantTable,
    SCHEME_CUBIC,
    SCHEME_EXACT,
    compress_pixels,
    decompress,
    decompress_coeffs,
)
from .loss import (
    CovStats,
    LossBreakdown,
    LossWeights,
    combine_terms,
    cov_loss,
    cov_stats,
    loss_gradient,
    w1_sorted,
)
from .residual import (
    PatchSet,
    kb_residual,
    kb_residual_pixels,
    merge_patchsets,
    patch_change_probs,
    patch_grid_coords,
    patch_values,
    select_patches,
)
from .stego import EmbeddingConfig, embed, probmap_for_target


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256  # selected patches per gradient step
    max_epochs: int = 3000
    patience: int = 200
    seed: int = 2026
    kernel_size: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    std_min: float = 1.0
    prob_max: float = 0.01
    grad_step: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")
        if not 0 < self.patience < self.max_epochs:
            raise TrainingError("need 0 < patience < max_epochs")
        if self.kernel_size not in KERNEL_SIZES:
            raise TrainingError(f"kernel size {self.kernel_size} not in {KERNEL_SIZES}")
        if self.batch_size < 2:
            raise TrainingError("batch size must be at least 2 patches")


@dataclass
class DataSet:
    role: str  # "source-tif-pool", "source", or "target"
    items: list
    balance: str | None = None


@dataclass
class TargetSummary:
    """Frozen target-side statistics; only the source side moves in training."""

    cov: CovStats
    sorted_values: np.ndarray
    n_patches: int


def summarize_target(patches: PatchSet) -> TargetSummary:
    return TargetSummary(
        cov=cov_stats(patches),
        sorted_values=np.sort(patches.values.reshape(-1)),
        n_patches=len(patches),
    )


@dataclass
class EpochLog:
    epoch: int
    total: float
    cov_term: float
    w1_term: float
    realism_term: float
    lr: float


@dataclass
class TrainResult:
    pipeline: EmulatorPipeline
    log: list[EpochLog]
    best_epoch: int
    best_loss: float
    stopped: str  # "patience" or "max_epochs"
    weights: LossWeights  # with the frozen first-batch normalizers


class EarlyStopTracker:
    """Best-loss bookkeeping; stops after `patience` non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = -1
        self.since_improve = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best_loss:
            self.best_loss = value
            self.best_epoch = epoch
            self.since_improve = 0
            return True, False
        self.since_improve += 1
        return False, self.since_improve >= self.patience


# ---------------------------------------------------------------------------
# Target preparation: residuals, patches, probability-map filtering.
# ---------------------------------------------------------------------------


def prepare_target(planes: list[JpegPlane], cfg: EmbeddingConfig,
                   std_min: float = 1.0, prob_max: float = 0.01) -> PatchSet:
    """Selected residual patches of a homogeneous target set, augmented by the
    four orthogonal rotations of every plane."""
    if not planes:
        raise TrainingError("target set is empty")
    table = planes[0].table
    for plane in planes[1:]:
        if plane.table != table:
            raise HomogeneityError("target planes mix quantization tables")
    pieces = []
    for plane in planes:
        probmap = probmap_for_target(plane, cfg)
        pix = decompress(plane).data
        res = kb_residual_pixels(pix)
        beta_max = probmap.beta.max(axis=(-1, -2))
        for k in range(4):
            pr = np.rot90(pix, k)
            rr = np.rot90(res, k)
            bm = np.rot90(beta_max, k)
            h, w = pr.shape
            rows, cols = patch_grid_coords(h, w)
            pieces.append(
                PatchSet(
                    values=patch_values(rr),
                    block_row=rows,
                    block_col=cols,
                    pixel_std=patch_values(pr).std(axis=-1),
                    max_change_prob=patch_change_probs(bm),
                )
            )
    merged = merge_patchsets(pieces, source_tag="target")
    return select_patches(merged, std_min=std_min, prob_max=prob_max)


# ---------------------------------------------------------------------------
# The batch loss closure: loss of a fixed image batch as a function of the
# raw emulator parameters. Provides a vectorized multi-point evaluator so the
# finite-difference probes share one pass through the heavy image pipeline.
# ---------------------------------------------------------------------------


def _conv_paired(x: np.ndarray, grids: np.ndarray) -> np.ndarray:
    """Convolve x[v] with grids[v] for each leading index v (mirror borders)."""
    k = grids.shape[-1]
    r = k // 2
    h, w = x.shape[-2], x.shape[-1]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(x, pad_spec, mode="symmetric")
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            weight = grids[:, i, j].reshape((-1,) + (1,) * (x.ndim - 1))
            out += weight * padded[..., i : i + h, j : j + w]
    return out


class TadaBatchClosure:
    """total_loss(batch | params): source patches vs frozen target statistics.

    `pixels16` is (B, H, W) for grayscale pools or (B, 3, H, W) for RGB pools.
    Weights must be frozen (see freeze_weights) before gradient evaluation so
    every finite-difference probe is normalized identically.
    """

    def __init__(
        self,
        pixels16: np.ndarray,
        target: TargetSummary,
        weights: LossWeights,
        table: QuantTable,
        kernel_size: int,
        std_min: float,
        rgb: bool = False,
    ):
        self.x16 = np.asarray(pixels16, dtype=np.float64)
        self.rgb = rgb
        if not rgb:
            self.x8 = self.x16 / 257.0
        self.target = target
        self.weights = weights
        self.q = table.q
        self.kernel_size = kernel_size
        self.n_kernel = n_classes(kernel_size)
        self.std_min = std_min
        self.n_params = self.n_kernel + (3 if rgb else 0)

    def _pipeline_arrays(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """points (V, P) -> (developed pixels, residual patches, pixel stds)."""
        grids = materialize_params(points[:, : self.n_kernel], self.kernel_size)
        if self.rgb:
            mixed16 = np.einsum("vc,bchw->vbhw", points[:, self.n_kernel :], self.x16)
            y = _conv_paired(mixed16 / 257.0, grids)
            tif16 = mixed16
        else:
            y = convolve_reflect(self.x8, grids)
            tif16 = None
        coeffs = compress_pixels(y, self.q, SCHEME_CUBIC)
        dev = decompress_coeffs(coeffs, self.q, clamp=False)
        res = kb_residual_pixels(dev)
        return dev, patch_values(res), patch_values(dev).std(axis=-1), tif16

    def _raw_terms(self, points: np.ndarray) -> list[tuple[float, float, float]]:
        dev, pvals, pstds, tif16 = self._pipeline_arrays(points)
        out = []
        for v in range(points.shape[0]):
            keep = pstds[v].reshape(-1) > self.std_min
            if keep.sum() < 2:
                raise TrainingError(
                    f"batch kept {int(keep.sum())} patches; need at least 2"
                )
            x = pvals[v].reshape(-1, pvals.shape[-1])[keep]
            raw_cov = cov_loss(cov_stats(x), self.target.cov)
            raw_w1 = w1_sorted(np.sort(x.reshape(-1)), self.target.sorted_values)
            t16 = tif16[v] if self.rgb else self.x16
            diff = t16 / 65535.0 - dev[v] / 255.0
            raw_realism = float(np.mean(diff * diff))
            out.append((raw_cov, raw_w1, raw_realism))
        return out

    def selected_count(self, params: np.ndarray) -> int:
        _, _, pstds, _ = self._pipeline_arrays(np.asarray(params, dtype=np.float64)[None, :])
        return int((pstds[0].reshape(-1) > self.std_min).sum())

    def freeze_weights(self, params: np.ndarray) -> None:
        (raw,) = self._raw_terms(np.asarray(params, dtype=np.float64)[None, :])
        self.weights.freeze(*raw)

    def evaluate_many(self, points: np.ndarray) -> list[tuple[float, LossBreakdown]]:
        if not self.weights.frozen:
            raise TrainingError("freeze loss normalizers before gradient evaluation")
        points = np.asarray(points, dtype=np.float64)
        return [combine_terms(*raw, self.weights) for raw in self._raw_terms(points)]

    def __call__(self, params: np.ndarray) -> tuple[float, LossBreakdown]:
        return self.evaluate_many(np.asarray(params, dtype=np.float64)[None, :])[0]


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------


def _pool_arrays(tifs: DataSet) -> tuple[list[np.ndarray], bool]:
    """Rotation-augmented pool as raw arrays; requires square, same-size images."""
    if not tifs.items:
        raise TrainingError("source TIF pool is empty")
    rgb = isinstance(tifs.items[0], RgbImage)
    arrays = []
    shape = None
    for img in tifs.items:
        if isinstance(img, RgbImage) != rgb:
            raise TrainingError("source pool mixes grayscale and RGB images")
        data = np.stack([c.data for c in img.channels]) if rgb else img.data
        if img.width != img.height:
            raise TrainingError("training pool images must be square")
        if shape is None:
            shape = data.shape
        elif data.shape != shape:
            raise TrainingError("training pool images must share dimensions")
        for k in range(4):
            arrays.append(np.rot90(data, k, axes=(-2, -1)).copy())
    return arrays, rgb


def _project_params(params: np.ndarray, kernel_size: int, rgb: bool) -> np.ndarray:
    nk = n_classes(kernel_size)
    _, orbit_sizes, _ = symmetry_orbits(kernel_size)
    out = params.copy()
    s = float(np.dot(out[:nk], orbit_sizes))
    if abs(s) < 1e-12:
        raise DegenerateKernelError(f"kernel sum {s} too close to zero to normalize")
    out[:nk] = out[:nk] / s
    if rgb:
        w = np.clip(out[nk:], 0.0, None)
        ws = w.sum()
        if ws < 1e-12:
            raise DegenerateKernelError("mixer weights collapsed to zero")
        out[nk:] = w / ws
    return out


def train(
    tifs: DataSet,
    target_patches: PatchSet,
    table: QuantTable,
    cfg: TrainConfig,
    progress=None,
) -> TrainResult:
    """Fit the emulator so developed-pool residual statistics match the target.

    Deterministic: a pure function of (pool, target patches, table, config).
    Returns the parameters of the best epoch, not the last one.
    """
    if len(target_patches) < 2:
        raise TrainingError("target patch set needs at least 2 patches")
    arrays, rgb = _pool_arrays(tifs)
    target = summarize_target(target_patches)
    weights = replace(cfg.weights, normalizers=None)
    nk = n_classes(cfg.kernel_size)
    params = np.zeros(nk + (3 if rgb else 0))
    params[:nk] = identity_kernel(cfg.kernel_size).free_params
    if rgb:
        params[nk:] = 1.0 / 3.0

    def make_closure(stack: np.ndarray) -> TadaBatchClosure:
        return TadaBatchClosure(
            stack, target, weights, table, cfg.kernel_size, cfg.std_min, rgb=rgb
        )

    pool_closure = make_closure(np.stack(arrays))
    rng = np.random.default_rng(cfg.seed)
    tracker = EarlyStopTracker(cfg.patience)
    best_params = params.copy()
    log: list[EpochLog] = []
    stopped = "max_epochs"

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(arrays))
        pos = 0
        while pos < len(arrays):
            batch, have = [], 0
            while pos < len(arrays) and have < cfg.batch_size:
                arr = arrays[perm[pos]]
                pos += 1
                have += make_closure(arr[None]).selected_count(params)
                batch.append(arr)
            if have < 2:
                continue  # trailing flat leftovers cannot carry a covariance
            closure = make_closure(np.stack(batch))
            if not weights.frozen:
                closure.freeze_weights(params)
            grad = loss_gradient(params, closure, step=cfg.grad_step)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            params = params - cfg.lr * grad
        if not weights.frozen:
            raise TrainingError("no batch reached the patch quota; pool too flat")
        params = _project_params(params, cfg.kernel_size, rgb)
        _, orbit_sizes, _ = symmetry_orbits(cfg.kernel_size)
        assert abs(float(np.dot(params[:nk], orbit_sizes)) - 1.0) < 1e-9
        total, breakdown = pool_closure(params)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite pool loss at epoch {epoch}")
        log.append(
            EpochLog(
                epoch=epoch,
                total=total,
                cov_term=breakdown.cov_term,
                w1_term=breakdown.w1_term,
                realism_term=breakdown.realism_term,
                lr=cfg.lr,
            )
        )
        improved, stop = tracker.update(epoch, total)
        if improved:
            best_params = params.copy()
        if progress is not None:
            progress(epoch, total)
        if stop:
            stopped = "patience"
            break

    kernel = SymmetricKernel(cfg.kernel_size, best_params[:nk])
    mixer = None
    if rgb:
        from .emulator import ChannelMixer

        mixer = ChannelMixer(best_params[nk:])
    pipeline = EmulatorPipeline(
        kernel=kernel, table=table, scheme=SCHEME_EXACT, mixer=mixer
    )
    return TrainResult(
        pipeline=pipeline,
        log=log,
        best_epoch=tracker.best_epoch,
        best_loss=tracker.best_loss,
        stopped=stopped,
        weights=weights,
    )


def pool_loss(
    tifs: DataSet,
    target_patches: PatchSet,
    table: QuantTable,
    cfg: TrainConfig,
    params: np.ndarray,
    weights: LossWeights,
) -> float:
    """Full-pool loss at fixed parameters; recomputes what train() monitored."""
    arrays, rgb = _pool_arrays(tifs)
    closure = TadaBatchClosure(
        np.stack(arrays),
        summarize_target(target_patches),
        weights,
        table,
        cfg.kernel_size,
        cfg.std_min,
        rgb=rgb,
    )
    total, _ = closure(np.asarray(params, dtype=np.float64))
    return total


# ---------------------------------------------------------------------------
# Dataset emission: develop covers with the frozen pipeline, embed stegos.
# ---------------------------------------------------------------------------


def emit_source(
    pipeline: EmulatorPipeline,
    tifs: DataSet,
    cfg: EmbeddingConfig,
    n_pairs: int,
    seed: int,
    out_dir=None,
) -> DataSet:
    """Develop n_pairs pool images into cover planes and embed paired stegos.

    Always runs the exact rounding scheme. Per-image embedding streams derive
    from (seed, image index), so emission order does not matter. When out_dir
    is given, cover/NNNNN.jca and stego/NNNNN.jca archives are written.
    """
    if n_pairs < 0:
        raise TrainingError("n_pairs must be nonnegative")
    if n_pairs > len(tifs.items):
        raise TrainingError(
            f"pool holds {len(tifs.items)} images; cannot emit {n_pairs} pairs"
        )
    exact = replace(pipeline, scheme=SCHEME_EXACT)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "cover").mkdir(parents=True, exist_ok=True)
        (out_dir / "stego").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n_pairs):
        cover = develop([tifs.items[i]], exact)[0]
        probmap = probmap_for_target(cover, cfg)
        stego = embed(cover, probmap, seed=[seed, i])
        if out_dir is not None:
            from .jpegdiff import save_plane

            save_plane(cover, out_dir / "cover" / f"{i:05d}.jca")
            save_plane(stego, out_dir / "stego" / f"{i:05d}.jca")
        pairs.append((cover, stego))
    return DataSet(role="source", items=pairs)


# ---------------------------------------------------------------------------
# Checkpoints and logs.
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="ascii")
    os.replace(tmp, path)


def save_checkpoint(directory, result: TrainResult, cfg: TrainConfig, seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp_kernel = directory / "checkpoint.kernel.tmp"
    save_kernel(result.pipeline, tmp_kernel)
    os.replace(tmp_kernel, directory / "checkpoint.kernel")
    sidecar = {
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
        "stopped": result.stopped,
        "epochs_run": len(result.log),
        "seed": seed,
        "normalizers": list(result.weights.normalizers),
        "config": {
            "lr": cfg.lr,
            "batch_size": cfg.batch_size,
            "max_epochs": cfg.max_epochs,
            "patience": cfg.patience,
            "kernel_size": cfg.kernel_size,
            "std_min": cfg.std_min,
            "prob_max": cfg.prob_max,
            "grad_step": cfg.grad_step,
            "lambda_cov": cfg.weights.lambda_cov,
            "mu_dist": cfg.weights.mu_dist,
            "gamma_real": cfg.weights.gamma_real,
        },
    }
    _atomic_write_text(
        directory / "checkpoint.json", json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    )


def load_checkpoint(directory) -> tuple[EmulatorPipeline, dict]:
    directory = Path(directory)
    pipeline = load_kernel(directory / "checkpoint.kernel")
    sidecar = json.loads((directory / "checkpoint.json").read_text(encoding="ascii"))
    return pipeline, sidecar


def write_train_log(path, log: list[EpochLog]) -> None:
    lines = ["epoch,total,cov_term,w1_term,realism_term,lr"]
    for row in log:
        lines.append(
            f"{row.epoch},{row.total!r},{row.cov_term!r},"
            f"{row.w1_term!r},{row.realism_term!r},{row.lr!r}"
        )
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")
