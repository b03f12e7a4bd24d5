"""Image containers, binary PGM I/O, and synthetic sensor images.

Images are stored as float64 arrays of shape (height, width) regardless of
declared depth; "u8" and "u16" images must hold integral values inside their
range, "real" images are unconstrained and carry intermediate pipeline data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import (
    AlignmentError,
    ImageError,
    PgmHeaderError,
    PgmMaxvalError,
    PgmTruncatedError,
)

DEPTH_U8 = "u8"
DEPTH_U16 = "u16"
DEPTH_REAL = "real"

_MAXVAL = {DEPTH_U8: 255, DEPTH_U16: 65535}


@dataclass
class GrayImage:
    width: int
    height: int
    depth: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.height, self.width):
            raise ImageError(
                f"data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.depth == DEPTH_REAL:
            return
        maxval = _MAXVAL.get(self.depth)
        if maxval is None:
            raise ImageError(f"unknown depth {self.depth!r}")
        if self.data.size:
            lo, hi = self.data.min(), self.data.max()
            if lo < 0 or hi > maxval:
                raise ImageError(
                    f"{self.depth} values must lie in [0, {maxval}], "
                    f"got [{lo}, {hi}]"
                )
            if not np.array_equal(self.data, np.round(self.data)):
                raise ImageError(f"{self.depth} image holds non-integral values")


@dataclass
class RgbImage:
    width: int
    height: int
    channels: tuple[GrayImage, GrayImage, GrayImage]

    def __post_init__(self):
        for plane in self.channels:
            if (plane.width, plane.height) != (self.width, self.height):
                raise ImageError("RGB planes must share dimensions")


@dataclass
class SensorNoiseModel:
    """Heteroscedastic acquisition noise: variance = gain_a * signal + sigma_b^2."""

    gain_a: float
    sigma_b: float
    seed: int

    def __post_init__(self):
        if self.gain_a < 0 or self.sigma_b < 0:
            raise ImageError("noise parameters must be nonnegative")


def gray_from_array(data: np.ndarray, depth: str = DEPTH_REAL) -> GrayImage:
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape
    return GrayImage(width=w, height=h, depth=depth, data=data)


# ---------------------------------------------------------------------------
# Binary PGM (P5).  Canonical layout: b"P5\n<w> <h>\n<maxval>\n" + payload,
# 16-bit samples big-endian.
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _next_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        c = blob[pos : pos + 1]
        if c == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise PgmHeaderError("unterminated comment in header")
            pos = nl + 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and blob[pos : pos + 1] not in _WHITESPACE + b"#":
        pos += 1
    if start == pos:
        raise PgmHeaderError("truncated header")
    return blob[start:pos], pos


def read_pgm(path) -> GrayImage:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise PgmHeaderError("not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _next_token(blob, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PgmHeaderError(f"non-numeric header field {token!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PgmHeaderError(f"invalid dimensions {width}x{height}")
    if maxval == 255:
        depth, itemsize = DEPTH_U8, 1
    elif maxval == 65535:
        depth, itemsize = DEPTH_U16, 2
    else:
        raise PgmMaxvalError(f"unsupported maxval {maxval} (want 255 or 65535)")
    if pos >= len(blob) or blob[pos : pos + 1] not in _WHITESPACE:
        raise PgmHeaderError("missing whitespace before pixel payload")
    pos += 1
    need = width * height * itemsize
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise PgmTruncatedError(f"payload holds {len(payload)} bytes, need {need}")
    dtype = np.dtype(">u2") if itemsize == 2 else np.uint8
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return GrayImage(width, height, depth, data.reshape(height, width))


def write_pgm(img: GrayImage, path) -> None:
    if img.depth == DEPTH_REAL:
        raise ImageError("real-valued image: quantize to u8/u16 before writing PGM")
    maxval = _MAXVAL[img.depth]
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    dtype = np.dtype(">u2") if img.depth == DEPTH_U16 else np.uint8
    payload = img.data.astype(dtype).tobytes()
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Synthetic sensor image: the 16-bit stand-in for demosaicked capture data.
# ---------------------------------------------------------------------------


def _minmax01(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def synth_sensor_image(
    width: int, height: int, smoothness: int, model: SensorNoiseModel
) -> GrayImage:
    """Generate a 16-bit sensor image: clean scene plus per-pixel independent noise.

    The scene is a low-pass-filtered uniform field (filter radius =
    `smoothness`) with texture injected in regions gated by a second smooth
    field, so both quiet and busy JPEG blocks occur; `smoothness <= 0` yields a
    flat mid-range scene. Per-pixel noise variance is
    gain_a * clean + sigma_b**2. Deterministic for a given model seed.
    """
    if width % 8 or height % 8:
        raise AlignmentError(f"dimensions {width}x{height} must be multiples of 8")
    rng = np.random.default_rng(model.seed)
    if smoothness <= 0:
        clean = np.full((height, width), 32768.0)
    else:
        size = 2 * int(smoothness) + 1
        base = _minmax01(
            uniform_filter(rng.random((height, width)), size=size, mode="reflect")
        )
        gate = _minmax01(
            uniform_filter(rng.random((height, width)), size=2 * size + 1, mode="reflect")
        )
        # Roughly the upper half of the gate field carries broadband texture;
        # the rest stays smooth so the pooled block energies spread widely.
        gate = np.clip((gate - 0.45) / 0.25, 0.0, 1.0)
        detail = rng.random((height, width)) - 0.5
        scene01 = 0.25 + 0.5 * base + 0.7 * gate * detail
        clean = np.clip(scene01, 0.0, 1.0) * 65535.0
    noise_std = np.sqrt(model.gain_a * clean + model.sigma_b**2)
    noisy = clean + rng.standard_normal((height, width)) * noise_std
    data = np.clip(np.round(noisy), 0.0, 65535.0)
    return GrayImage(width, height, DEPTH_U16, data)


def rotate90(img: GrayImage, quarter_turns: int) -> GrayImage:
    """Rotate by quarter turns counterclockwise. Exact, content-preserving."""
    k = int(quarter_turns) % 4
    if k == 0:
        return GrayImage(img.width, img.height, img.depth, img.data.copy())
    data = np.rot90(img.data, k).copy()
    h, w = data.shape
    return GrayImage(w, h, img.depth, data)
