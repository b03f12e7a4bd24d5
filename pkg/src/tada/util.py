"""Small shared helpers: thread cap and seed derivation."""

from __future__ import annotations

import os

from .errors import ConfigError

# Stable role codes mixed into per-image seed streams so each dataset role
# draws from a disjoint deterministic stream.
ROLE_CODES = {
    "pool": 0,
    "target-operational": 1,
    "target-train": 2,
    "target-eval": 3,
    "source-bench": 4,
    "embed": 5,
}


def image_seed(master_seed: int, role: str, index: int) -> list[int]:
    """Entropy list for numpy's default_rng: (global seed, role, image index)."""
    if role not in ROLE_CODES:
        raise ConfigError(f"unknown seed role {role!r}")
    return [int(master_seed), ROLE_CODES[role], int(index)]


def worker_count() -> int:
    """Parallelism cap from TADA_THREADS; defaults to 1 (fully sequential)."""
    raw = os.environ.get("TADA_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TADA_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"TADA_THREADS must be >= 1, got {n}")
    return n
