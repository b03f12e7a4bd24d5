"""UERD cost model, payload-constrained ternary embedding simulation, and the
per-coefficient change-probability maps shared by embedding and patch
selection.

Costs follow the block-energy form: within block b, the AC cost is
q(i,j) / (E_b + 0.25 * sum of 4-neighbor block energies) where
E_b = sum over AC positions of |c| * q; the DC cost substitutes the mean AC
quantization step for q(i,j). Blocks with zero pooled energy are wet
(unmodifiable). Change rates come from the usual Gibbs form
beta = exp(-lambda rho) / (1 + 2 exp(-lambda rho)) with lambda solved by
bisection against the requested payload in ternary-entropy bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArchiveError, CapacityError, ExactModeError, ImageError, SolverError
from .jpegdiff import SCHEME_EXACT, JpegPlane, ZIGZAG_I, ZIGZAG_J

LOG2_3 = math.log2(3.0)

_LAMBDA_MAX = 1e4
_MAX_BISECT = 200
_REL_TOL = 1e-6


@dataclass
class EmbeddingConfig:
    payload_bpnzac: float
    seed: int
    scheme: str = "UERD"

    def __post_init__(self):
        if self.scheme != "UERD":
            raise ImageError(f"unsupported embedding scheme {self.scheme!r}")
        if not 0.0 < self.payload_bpnzac <= LOG2_3:
            raise ImageError(
                f"payload {self.payload_bpnzac} bpnzac outside (0, log2(3)]"
            )


@dataclass
class CostMap:
    rho: np.ndarray  # (hb, wb, 8, 8), +inf on wet coefficients
    wet: np.ndarray  # same shape, bool


@dataclass
class ProbabilityMap:
    beta: np.ndarray  # (hb, wb, 8, 8) change probability for +1 (and -1)
    lam: float


def nonzero_ac_count(plane: JpegPlane) -> int:
    c = plane.coeffs
    return int(np.count_nonzero(c) - np.count_nonzero(c[:, :, 0, 0]))


def uerd_costs(plane: JpegPlane) -> CostMap:
    if plane.mode != SCHEME_EXACT:
        raise ExactModeError("UERD costs need integer coefficients")
    q = plane.table.q.astype(np.float64)
    absc = np.abs(plane.coeffs)
    energy = (absc * q).sum(axis=(-1, -2)) - absc[:, :, 0, 0] * q[0, 0]
    padded = np.pad(energy, 1)
    pooled = energy + 0.25 * (
        padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
    )
    wet_block = pooled == 0.0
    q_dc_proxy = q.reshape(-1)[1:].mean()  # mean AC step stands in for the DC step
    numer = np.broadcast_to(q, plane.coeffs.shape).copy()
    numer[:, :, 0, 0] = q_dc_proxy
    with np.errstate(divide="ignore"):
        rho = numer / pooled[:, :, None, None]
    rho[wet_block, :, :] = np.inf
    wet = np.broadcast_to(wet_block[:, :, None, None], plane.coeffs.shape).copy()
    return CostMap(rho=rho, wet=wet)


def ternary_entropy_bits(beta: np.ndarray) -> np.ndarray:
    """Elementwise H3(beta) = -2 b log2 b - (1-2b) log2(1-2b), with H3(0) = 0."""
    b = np.asarray(beta, dtype=np.float64)
    out = np.zeros_like(b)
    nz = b > 0.0
    bn = b[nz]
    out[nz] = -2.0 * bn * np.log2(bn) - (1.0 - 2.0 * bn) * np.log2(1.0 - 2.0 * bn)
    return out


def _betas(lam: float, rho: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(-lam * rho)
    return e / (1.0 + 2.0 * e)


def solve_lambda(costs: CostMap, payload_bits: float) -> ProbabilityMap:
    """Find lambda so the total ternary entropy meets the payload.

    Bisection over [0, 1e4], at most 200 iterations, 1e-6 relative tolerance
    on the achieved entropy. Wet coefficients keep beta = 0.
    """
    if payload_bits < 0:
        raise ImageError("payload must be nonnegative")
    beta = np.zeros_like(costs.rho)
    if payload_bits == 0.0:
        return ProbabilityMap(beta=beta, lam=math.inf)
    finite = ~costs.wet
    rho_f = costs.rho[finite]
    capacity = LOG2_3 * rho_f.size
    if payload_bits > capacity:
        raise CapacityError(
            f"payload {payload_bits} bits exceeds capacity {capacity} bits"
        )
    if payload_bits >= capacity * (1.0 - 1e-12):
        beta[finite] = 1.0 / 3.0
        return ProbabilityMap(beta=beta, lam=0.0)
    if ternary_entropy_bits(_betas(_LAMBDA_MAX, rho_f)).sum() > payload_bits:
        raise SolverError(
            f"payload {payload_bits} bits still exceeded at lambda {_LAMBDA_MAX}"
        )
    lo, hi = 0.0, _LAMBDA_MAX
    for _ in range(_MAX_BISECT):
        mid = 0.5 * (lo + hi)
        b = _betas(mid, rho_f)
        achieved = ternary_entropy_bits(b).sum()
        if abs(achieved - payload_bits) <= _REL_TOL * payload_bits:
            beta[finite] = b
            return ProbabilityMap(beta=beta, lam=mid)
        if achieved > payload_bits:
            lo = mid
        else:
            hi = mid
    raise SolverError(
        f"bisection did not reach {_REL_TOL} relative tolerance in {_MAX_BISECT} steps"
    )


def embed(plane: JpegPlane, probmap: ProbabilityMap, seed) -> JpegPlane:
    """Simulate optimal ternary embedding: each coefficient moves +1 or -1
    with probability beta each, independently, from a seeded stream."""
    if plane.mode != SCHEME_EXACT:
        raise ExactModeError("embedding needs integer coefficients")
    if probmap.beta.shape != plane.coeffs.shape:
        raise ImageError("probability map shape does not match the plane")
    rng = np.random.default_rng(seed)
    u = rng.random(plane.coeffs.shape)
    delta = np.where(u < probmap.beta, 1.0, np.where(u < 2.0 * probmap.beta, -1.0, 0.0))
    return JpegPlane(
        plane.width, plane.height, plane.coeffs + delta, plane.table, SCHEME_EXACT
    )


def probmap_for_target(plane: JpegPlane, cfg: EmbeddingConfig) -> ProbabilityMap:
    """Simulate the steganographer on one plane: UERD costs, then the payload
    implied by this plane's nonzero-AC count."""
    nzac = nonzero_ac_count(plane)
    if nzac == 0:
        return ProbabilityMap(beta=np.zeros_like(plane.coeffs), lam=math.inf)
    return solve_lambda(uerd_costs(plane), cfg.payload_bpnzac * nzac)


# ---------------------------------------------------------------------------
# Probability-map archive ("PMB1"): like the coefficient archive, with
# float64 betas in zigzag order and the solved lambda in the header.
# ---------------------------------------------------------------------------

_MAGIC_PROBMAP = b"PMB1"


def save_probmap(probmap: ProbabilityMap, path) -> None:
    hb, wb = probmap.beta.shape[:2]
    zz = probmap.beta[:, :, ZIGZAG_I, ZIGZAG_J].reshape(-1, 64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC_PROBMAP)
        fh.write(struct.pack("<ii", wb * 8, hb * 8))
        fh.write(struct.pack("<d", probmap.lam))
        fh.write(zz.astype("<f8").tobytes())


def load_probmap(path) -> ProbabilityMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC_PROBMAP:
        raise ArchiveError(f"{path}: bad magic {blob[:4]!r}")
    width, height = struct.unpack("<ii", blob[4:12])
    (lam,) = struct.unpack("<d", blob[12:20])
    n_blocks = (width // 8) * (height // 8)
    body = np.frombuffer(blob[20:], dtype="<f8")
    if body.size != n_blocks * 64:
        raise ArchiveError(f"{path}: expected {n_blocks * 64} betas, found {body.size}")
    beta = np.zeros((height // 8, width // 8, 8, 8))
    beta[:, :, ZIGZAG_I, ZIGZAG_J] = body.reshape(height // 8, width // 8, 64)
    return ProbabilityMap(beta=beta, lam=lam)
