"""Blockwise JPEG transform with exact and differentiable quantization.

Only the luminance path exists: targets are grayscale. Planes are stored as
(block_rows, block_cols, 8, 8) float64 coefficient arrays; "exact" planes hold
integers, "differentiable" planes hold the cubic rounding surrogate output.
Entropy coding never happens; exact planes persist to a raw coefficient
archive instead (see save_plane).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ArchiveError, ExactModeError, ImageError
from .imagecore import DEPTH_REAL, GrayImage

SCHEME_EXACT = "exact"
SCHEME_CUBIC = "cubic"
_SCHEMES = (SCHEME_EXACT, SCHEME_CUBIC)

# Annex-K luminance base table (row-major).
BASE_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


@dataclass
class QuantTable:
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int64)
        if self.q.shape != (8, 8):
            raise ImageError("quantization table must be 8x8")
        if self.q.min() < 1 or self.q.max() > 255:
            raise ImageError("quantization entries must lie in [1, 255]")

    def __eq__(self, other):
        return isinstance(other, QuantTable) and np.array_equal(self.q, other.q)


@dataclass
class JpegPlane:
    width: int
    height: int
    coeffs: np.ndarray  # (height//8, width//8, 8, 8) float64
    table: QuantTable
    mode: str  # SCHEME_EXACT or "differentiable"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expected = (self.height // 8, self.width // 8, 8, 8)
        if self.coeffs.shape != expected:
            raise ImageError(
                f"coefficient array shape {self.coeffs.shape}, expected {expected}"
            )


def quant_table_from_qf(qf: int) -> QuantTable:
    """IJG scaling of the base luminance table for a quality factor in 1..100."""
    qf = int(qf)
    if not 1 <= qf <= 100:
        raise ImageError(f"quality factor {qf} outside 1..100")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    q = (BASE_LUMA_TABLE * scale + 50) // 100
    return QuantTable(np.clip(q, 1, 255))


# ---------------------------------------------------------------------------
# Orthonormal 8x8 type-II DCT.
# ---------------------------------------------------------------------------


def _dct_matrix() -> np.ndarray:
    k = np.arange(8).reshape(8, 1)
    n = np.arange(8).reshape(1, 8)
    m = np.cos(np.pi * (2 * n + 1) * k / 16) * np.sqrt(2.0 / 8.0)
    m[0, :] = np.sqrt(1.0 / 8.0)
    return m


_DCT = _dct_matrix()


def dct8x8_forward(blocks: np.ndarray) -> np.ndarray:
    """Forward DCT on (..., 8, 8) blocks. Orthonormal: preserves l2 norm."""
    return _DCT @ blocks @ _DCT.T


def dct8x8_inverse(blocks: np.ndarray) -> np.ndarray:
    return _DCT.T @ blocks @ _DCT


def to_blocks(pixels: np.ndarray) -> np.ndarray:
    """(..., H, W) -> (..., H//8, W//8, 8, 8); H, W must be multiples of 8."""
    *lead, h, w = pixels.shape
    if h % 8 or w % 8:
        raise AlignmentError(f"dimensions {w}x{h} must be multiples of 8")
    blocks = pixels.reshape(*lead, h // 8, 8, w // 8, 8)
    return blocks.swapaxes(-3, -2)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    *lead, hb, wb, _, _ = blocks.shape
    return blocks.swapaxes(-3, -2).reshape(*lead, hb * 8, wb * 8)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero; the tie rule everywhere in this package."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def approx_round(x: np.ndarray, scheme: str) -> np.ndarray:
    """Exact rounding or its cubic surrogate r(x) = round(x) + (x - round(x))^3."""
    r = round_half_away(x)
    if scheme == SCHEME_EXACT:
        return r
    if scheme == SCHEME_CUBIC:
        return r + (x - r) ** 3
    raise ImageError(f"unknown rounding scheme {scheme!r}")


def approx_round_derivative(x: np.ndarray, scheme: str = SCHEME_CUBIC) -> np.ndarray:
    """Formal derivative: 3 (x - round(x))^2 for cubic, 0 for exact rounding."""
    if scheme == SCHEME_EXACT:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    if scheme == SCHEME_CUBIC:
        t = x - round_half_away(x)
        return 3.0 * t**2
    raise ImageError(f"unknown rounding scheme {scheme!r}")


def compress_pixels(pixels: np.ndarray, q: np.ndarray, scheme: str) -> np.ndarray:
    """Level shift, blockwise DCT, quantize, round. pixels in 8-bit scale."""
    blocks = to_blocks(np.asarray(pixels, dtype=np.float64) - 128.0)
    return approx_round(dct8x8_forward(blocks) / q, scheme)


def decompress_coeffs(coeffs: np.ndarray, q: np.ndarray, clamp: bool) -> np.ndarray:
    pixels = from_blocks(dct8x8_inverse(coeffs * q)) + 128.0
    if clamp:
        pixels = np.clip(pixels, 0.0, 255.0)
    return pixels


def compress(img: GrayImage, table: QuantTable, scheme: str) -> JpegPlane:
    """Compress a real-valued image in 8-bit scale into a coefficient plane."""
    if scheme not in _SCHEMES:
        raise ImageError(f"unknown rounding scheme {scheme!r}")
    coeffs = compress_pixels(img.data, table.q, scheme)
    mode = SCHEME_EXACT if scheme == SCHEME_EXACT else "differentiable"
    return JpegPlane(img.width, img.height, coeffs, table, mode)


def decompress(plane: JpegPlane) -> GrayImage:
    """Dequantize and invert. Exact planes clamp to [0, 255]; differentiable
    planes stay unclamped so gradients are meaningful."""
    pixels = decompress_coeffs(plane.coeffs, plane.table.q, clamp=plane.mode == SCHEME_EXACT)
    return GrayImage(plane.width, plane.height, DEPTH_REAL, pixels)


# ---------------------------------------------------------------------------
# Coefficient archive ("JCA1"): exact planes only.
# magic | width, height (int32 LE) | 64 table entries (uint16 LE) |
# per block 64 int32 LE coefficients in zigzag order, blocks in raster order.
# ---------------------------------------------------------------------------


def _zigzag_indices() -> tuple[np.ndarray, np.ndarray]:
    order = []
    for s in range(15):
        diag = [(i, s - i) for i in range(8) if 0 <= s - i < 8]
        order.extend(diag if s % 2 else diag[::-1])
    zi, zj = zip(*order)
    return np.array(zi), np.array(zj)


ZIGZAG_I, ZIGZAG_J = _zigzag_indices()

_MAGIC_PLANE = b"JCA1"


def save_plane(plane: JpegPlane, path) -> None:
    if plane.mode != SCHEME_EXACT:
        raise ExactModeError("only exact planes can be archived")
    zz = plane.coeffs[:, :, ZIGZAG_I, ZIGZAG_J].reshape(-1, 64)
    header = _MAGIC_PLANE + struct.pack("<ii", plane.width, plane.height)
    table_bytes = plane.table.q.reshape(-1).astype("<u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table_bytes)
        fh.write(zz.astype("<i4").tobytes())


def load_plane(path) -> JpegPlane:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC_PLANE:
        raise ArchiveError(f"{path}: bad magic {blob[:4]!r}")
    width, height = struct.unpack("<ii", blob[4:12])
    if width % 8 or height % 8 or width <= 0 or height <= 0:
        raise ArchiveError(f"{path}: invalid dimensions {width}x{height}")
    table = QuantTable(np.frombuffer(blob[12:140], dtype="<u2").reshape(8, 8))
    n_blocks = (width // 8) * (height // 8)
    body = np.frombuffer(blob[140:], dtype="<i4")
    if body.size != n_blocks * 64:
        raise ArchiveError(
            f"{path}: expected {n_blocks * 64} coefficients, found {body.size}"
        )
    coeffs = np.zeros((height // 8, width // 8, 8, 8))
    coeffs[:, :, ZIGZAG_I, ZIGZAG_J] = body.reshape(height // 8, width // 8, 64)
    return JpegPlane(width, height, coeffs, table, SCHEME_EXACT)
