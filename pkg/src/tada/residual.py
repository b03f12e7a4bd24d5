"""Pipeline fingerprints: KB high-pass residuals and JPEG-grid patch statistics.

Residuals are tiled into non-overlapping 8x16 patches anchored on the JPEG
grid (two horizontally adjacent blocks per patch), so patches never straddle
image borders and covariance samples stay close to independent. Patch
selection keeps textured-but-quiet regions: pixel std above a floor, simulated
embedding change probability below a ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emulator import convolve_reflect
from .errors import AlignmentError, EmptySelectionError, ImageError
from .imagecore import DEPTH_REAL, GrayImage

KB_KERNEL = np.array([[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]) / 4.0

PATCH_ROWS = 8
PATCH_COLS = 16
PATCH_LEN = PATCH_ROWS * PATCH_COLS


def kb_residual_pixels(pixels: np.ndarray) -> np.ndarray:
    return convolve_reflect(pixels, KB_KERNEL)


def kb_residual(img: GrayImage) -> GrayImage:
    if img.width < 3 or img.height < 3:
        raise ImageError("image must be at least 3x3 for the residual filter")
    return GrayImage(img.width, img.height, DEPTH_REAL, kb_residual_pixels(img.data))


@dataclass
class PatchSet:
    """Flattened 8x16 residual patches plus per-patch selection statistics."""

    values: np.ndarray  # (n, 128)
    block_row: np.ndarray  # (n,) JPEG-grid row of the patch
    block_col: np.ndarray  # (n,) JPEG-grid column of the left 8x8 block
    pixel_std: np.ndarray  # (n,) std of the co-located pixel patch
    max_change_prob: np.ndarray  # (n,) max simulated change probability
    source_tag: str = ""

    def __len__(self) -> int:
        return self.values.shape[0]


def patch_values(x: np.ndarray) -> np.ndarray:
    """Tile (..., H, W) into (..., n, 128) raster-ordered 8x16 patches.

    An odd trailing block column is dropped so every patch covers two full
    blocks.
    """
    *lead, h, w = x.shape
    hb, wp = h // 8, (w // 8) // 2
    v = x[..., :, : wp * PATCH_COLS]
    v = v.reshape(*lead, hb, PATCH_ROWS, wp, PATCH_COLS).swapaxes(-3, -2)
    return v.reshape(*lead, hb * wp, PATCH_LEN)


def patch_grid_coords(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    hb, wp = height // 8, (width // 8) // 2
    rows = np.repeat(np.arange(hb), wp)
    cols = np.tile(np.arange(wp) * 2, hb)
    return rows, cols


def patch_change_probs(block_beta_max: np.ndarray) -> np.ndarray:
    """Per-patch max change probability from a per-block beta-max map."""
    hb, wb = block_beta_max.shape[-2], block_beta_max.shape[-1]
    wp = wb // 2
    paired = np.maximum(
        block_beta_max[..., :, 0 : wp * 2 : 2], block_beta_max[..., :, 1 : wp * 2 : 2]
    )
    return paired.reshape(*block_beta_max.shape[:-2], hb * wp)


def extract_patches(residual: GrayImage, pixel_img: GrayImage, probmap=None) -> PatchSet:
    """Tile a residual image into patches and attach selection statistics.

    `probmap` is a stego.ProbabilityMap (or None, in which case every patch
    reports zero change probability). `pixel_img` supplies the pixel std.
    """
    h, w = residual.height, residual.width
    if (pixel_img.height, pixel_img.width) != (h, w):
        raise ImageError("residual and pixel image dimensions differ")
    if h % 8 or w % 8:
        raise AlignmentError(f"dimensions {w}x{h} must be multiples of 8")
    if w < PATCH_COLS:
        raise ImageError(f"image narrower than {PATCH_COLS} pixels")
    values = patch_values(residual.data)
    stds = patch_values(pixel_img.data).std(axis=-1)
    rows, cols = patch_grid_coords(h, w)
    if probmap is None:
        probs = np.zeros(len(rows))
    else:
        beta_max = probmap.beta.max(axis=(-1, -2))
        probs = patch_change_probs(beta_max)
    return PatchSet(values, rows, cols, stds, probs)


def select_patches(
    patches: PatchSet, std_min: float = 1.0, prob_max: float = 0.01
) -> PatchSet:
    """Keep patches with pixel_std > std_min and max_change_prob < prob_max.

    Order is preserved. An empty result raises, carrying rejection counts:
    training must fail loudly rather than fit nothing.
    """
    std_ok = patches.pixel_std > std_min
    prob_ok = patches.max_change_prob < prob_max
    keep = std_ok & prob_ok
    if not keep.any():
        raise EmptySelectionError(
            total=len(patches),
            std_rejected=int((~std_ok).sum()),
            prob_rejected=int((~prob_ok).sum()),
        )
    return PatchSet(
        patches.values[keep],
        patches.block_row[keep],
        patches.block_col[keep],
        patches.pixel_std[keep],
        patches.max_change_prob[keep],
        patches.source_tag,
    )


def merge_patchsets(sets: list[PatchSet], source_tag: str = "") -> PatchSet:
    if not sets:
        return PatchSet(
            np.zeros((0, PATCH_LEN)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            np.zeros(0),
            source_tag,
        )
    return PatchSet(
        np.concatenate([s.values for s in sets]),
        np.concatenate([s.block_row for s in sets]),
        np.concatenate([s.block_col for s in sets]),
        np.concatenate([s.pixel_std for s in sets]),
        np.concatenate([s.max_change_prob for s in sets]),
        source_tag,
    )


def patchset_to_csv(patches: PatchSet, path) -> None:
    """Debug dump: selection stats plus the 128 residual values per row."""
    header = "block_row,block_col,pixel_std,max_change_prob," + ",".join(
        f"v{i}" for i in range(PATCH_LEN)
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header + "\n")
        for i in range(len(patches)):
            row = [
                str(int(patches.block_row[i])),
                str(int(patches.block_col[i])),
                repr(float(patches.pixel_std[i])),
                repr(float(patches.max_change_prob[i])),
            ] + [repr(float(v)) for v in patches.values[i]]
            fh.write(",".join(row) + "\n")
