"""The trainable pipeline emulator: one dihedral-symmetric convolution
(optionally preceded by a convex channel mixer) followed by JPEG compression.

Symmetry is built into the parameterization: free parameters are one weight
per orbit of the 8-fold dihedral group, so a materialized kernel is invariant
under flips and 90-degree rotation at all times. Only the sum-to-one
constraint needs an explicit projection (applied at epoch boundaries during
training).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateKernelError, ImageError
from .imagecore import DEPTH_REAL, DEPTH_U16, GrayImage, RgbImage
from .jpegdiff import (
    JpegPlane,
    QuantTable,
    SCHEME_EXACT,
    compress_pixels,
    quant_table_from_qf,
)

KERNEL_SIZES = (3, 5, 7)


def symmetry_orbits(size: int) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Return (orbit index grid, orbit sizes, canonical reps) for a kernel size.

    Orbits of the dihedral-8 action are identified by the sorted pair of
    absolute offsets from the center; reps are listed in lexicographic order,
    so index 0 is always the center.
    """
    if size not in KERNEL_SIZES:
        raise ImageError(f"kernel size {size} not in {KERNEL_SIZES}")
    m = size // 2
    reps = sorted(
        {tuple(sorted((abs(i - m), abs(j - m)))) for i in range(size) for j in range(size)}
    )
    lookup = {rep: idx for idx, rep in enumerate(reps)}
    grid = np.zeros((size, size), dtype=np.int64)
    for i in range(size):
        for j in range(size):
            grid[i, j] = lookup[tuple(sorted((abs(i - m), abs(j - m))))]
    sizes = np.bincount(grid.reshape(-1), minlength=len(reps))
    return grid, sizes, reps


def n_classes(size: int) -> int:
    return len(symmetry_orbits(size)[2])


@dataclass
class SymmetricKernel:
    """Free parameters are per-orbit weights in the canonical orbit order."""

    size: int
    free_params: np.ndarray

    def __post_init__(self):
        self.free_params = np.asarray(self.free_params, dtype=np.float64)
        expected = n_classes(self.size)
        if self.free_params.shape != (expected,):
            raise ImageError(
                f"{self.size}x{self.size} kernel needs {expected} class weights, "
                f"got shape {self.free_params.shape}"
            )


def identity_kernel(size: int) -> SymmetricKernel:
    params = np.zeros(n_classes(size))
    params[0] = 1.0
    return SymmetricKernel(size, params)


def materialize(kernel: SymmetricKernel) -> np.ndarray:
    grid, _, _ = symmetry_orbits(kernel.size)
    return kernel.free_params[grid]


def materialize_params(params: np.ndarray, size: int) -> np.ndarray:
    """Materialize raw class weights; params may carry leading batch axes."""
    grid, _, _ = symmetry_orbits(size)
    return np.asarray(params, dtype=np.float64)[..., grid]


def classes_from_grid(grid: np.ndarray) -> SymmetricKernel:
    """Inverse of materialize; rejects grids without the dihedral symmetry."""
    grid = np.asarray(grid, dtype=np.float64)
    size = grid.shape[0]
    index, _, reps = symmetry_orbits(size)
    m = size // 2
    params = np.array([grid[m + di, m + dj] for di, dj in reps])
    if not np.array_equal(params[index], grid):
        raise ImageError("grid is not dihedral-symmetric")
    return SymmetricKernel(size, params)


def kernel_sum(kernel: SymmetricKernel) -> float:
    _, sizes, _ = symmetry_orbits(kernel.size)
    return float(np.dot(kernel.free_params, sizes))


def project_constraints(kernel: SymmetricKernel) -> SymmetricKernel:
    """Rescale class weights so the materialized kernel sums to exactly 1."""
    s = kernel_sum(kernel)
    if abs(s) < 1e-12:
        raise DegenerateKernelError(f"kernel sum {s} too close to zero to normalize")
    return SymmetricKernel(kernel.size, kernel.free_params / s)


# ---------------------------------------------------------------------------
# Convolution with mirror boundaries. Kernels here are symmetric under the
# dihedral group, so correlation and convolution coincide.
# ---------------------------------------------------------------------------


def convolve_reflect(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """2-D convolution of (..., H, W) data with one or more kernels.

    `grid` is either (k, k) or (V, k, k); the latter applies V kernels to the
    same data and returns (V, ..., H, W). Boundary handling duplicates edge
    samples (np.pad "symmetric").
    """
    x = np.asarray(x, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    batched = grid.ndim == 3
    k = grid.shape[-1]
    r = k // 2
    h, w = x.shape[-2], x.shape[-1]
    if h < k or w < k:
        raise ImageError(f"image {w}x{h} smaller than kernel {k}x{k}")
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(x, pad_spec, mode="symmetric")
    out_shape = (grid.shape[0],) + x.shape if batched else x.shape
    out = np.zeros(out_shape)
    for i in range(k):
        for j in range(k):
            window = padded[..., i : i + h, j : j + w]
            if batched:
                weight = grid[:, i, j].reshape((-1,) + (1,) * x.ndim)
                out += weight * window
            else:
                out += grid[i, j] * window
    return out


def convolve(img: GrayImage, kernel: SymmetricKernel) -> GrayImage:
    out = convolve_reflect(img.data, materialize(kernel))
    return GrayImage(img.width, img.height, DEPTH_REAL, out)


# ---------------------------------------------------------------------------
# Channel mixer (grayscale conversion for RGB targets).
# ---------------------------------------------------------------------------


@dataclass
class ChannelMixer:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (3,):
            raise ImageError("mixer needs exactly 3 weights")
        if self.w.min() < 0 or abs(self.w.sum() - 1.0) > 1e-9:
            raise ImageError("mixer weights must be nonnegative and sum to 1")


def project_mixer(raw: np.ndarray) -> ChannelMixer:
    """Clamp raw weights at zero and renormalize onto the simplex."""
    w = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
    s = w.sum()
    if s < 1e-12:
        raise DegenerateKernelError("mixer weights collapsed to zero")
    return ChannelMixer(w / s)


def mix_channels(img: RgbImage, mixer: ChannelMixer) -> GrayImage:
    data = sum(wi * ch.data for wi, ch in zip(mixer.w, img.channels))
    return GrayImage(img.width, img.height, DEPTH_REAL, data)


# ---------------------------------------------------------------------------
# The full emulated pipeline: mix -> rescale -> convolve -> compress.
# ---------------------------------------------------------------------------


@dataclass
class EmulatorPipeline:
    kernel: SymmetricKernel
    table: QuantTable
    scheme: str
    mixer: ChannelMixer | None = None
    qf: int | None = None  # remembered when the table came from a quality factor


def develop_pixels(
    pixels16: np.ndarray, grid: np.ndarray, q: np.ndarray, scheme: str
) -> np.ndarray:
    """Array path: 16-bit-scale pixels (..., H, W) -> coefficients.

    `grid` may be (k, k) or (V, k, k) for multi-kernel evaluation.
    """
    x8 = np.asarray(pixels16, dtype=np.float64) / 257.0
    return compress_pixels(convolve_reflect(x8, grid), q, scheme)


def develop(images, pipeline: EmulatorPipeline) -> list[JpegPlane]:
    """Run the emulated pipeline over a batch of images.

    16-bit grayscale inputs are developed directly; RGB inputs require the
    pipeline to carry a channel mixer.
    """
    planes = []
    for img in images:
        if isinstance(img, RgbImage):
            if pipeline.mixer is None:
                raise ImageError("RGB input but pipeline has no channel mixer")
            gray = mix_channels(img, pipeline.mixer)
        else:
            if pipeline.mixer is not None:
                raise ImageError("pipeline has a mixer but input is grayscale")
            if img.depth != DEPTH_U16:
                raise ImageError("develop expects 16-bit input images")
            gray = img
        coeffs = develop_pixels(
            gray.data, materialize(pipeline.kernel), pipeline.table.q, pipeline.scheme
        )
        mode = SCHEME_EXACT if pipeline.scheme == SCHEME_EXACT else "differentiable"
        planes.append(JpegPlane(img.width, img.height, coeffs, pipeline.table, mode))
    return planes


# ---------------------------------------------------------------------------
# Table 1 style presets and the plain-text kernel file.
# ---------------------------------------------------------------------------

KERNEL_PRESETS = {
    "identity": np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64),
    "denoise": np.array(
        [[0.0625, 0.125, 0.0625], [0.125, 0.25, 0.125], [0.0625, 0.125, 0.0625]]
    ),
    "sharpen": np.array([[0.0, -0.25, 0.0], [-0.25, 2.0, -0.25], [0.0, -0.25, 0.0]]),
}


def preset_kernel(name: str) -> SymmetricKernel:
    if name not in KERNEL_PRESETS:
        raise ImageError(f"unknown kernel preset {name!r}")
    return classes_from_grid(KERNEL_PRESETS[name])


_KERNEL_MAGIC = "tada-kernel 1"


def save_kernel(pipeline: EmulatorPipeline, path) -> None:
    lines = [
        _KERNEL_MAGIC,
        f"size: {pipeline.kernel.size}",
        "classes: " + " ".join(repr(v) for v in pipeline.kernel.free_params),
        "mixer: "
        + ("none" if pipeline.mixer is None else " ".join(repr(v) for v in pipeline.mixer.w)),
        f"scheme: {pipeline.scheme}",
        f"qf: {'none' if pipeline.qf is None else pipeline.qf}",
        "table: " + " ".join(str(int(v)) for v in pipeline.table.q.reshape(-1)),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_kernel(path) -> EmulatorPipeline:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != _KERNEL_MAGIC:
        raise ImageError(f"{path}: not a kernel file")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        size = int(fields["size"])
        classes = np.array([float(v) for v in fields["classes"].split()])
        mixer = (
            None
            if fields["mixer"] == "none"
            else ChannelMixer(np.array([float(v) for v in fields["mixer"].split()]))
        )
        scheme = fields["scheme"]
        qf = None if fields["qf"] == "none" else int(fields["qf"])
        table = QuantTable(np.array([int(v) for v in fields["table"].split()]).reshape(8, 8))
    except (KeyError, ValueError) as exc:
        raise ImageError(f"{path}: malformed kernel file ({exc})") from None
    if qf is not None and table != quant_table_from_qf(qf):
        raise ImageError(f"{path}: stored table disagrees with qf {qf}")
    return EmulatorPipeline(
        kernel=SymmetricKernel(size, classes), table=table, scheme=scheme, mixer=mixer, qf=qf
    )
