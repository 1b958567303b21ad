"""Deterministic random streams.

Philox is counter-based, so streams are cheap to seed, replay bit-exactly,
and split into independent children for parallel replicates. Every
experiment records the integer seed it started from.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "split_rng", "open_unit_uniform"]

_INV_2_53 = 2.0**-53


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the same seed always replays the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n independent child streams; the parent advances deterministically."""
    return list(rng.spawn(n))


def open_unit_uniform(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform draws on the open interval (0, 1).

    Values sit on the midpoint grid (k + 0.5) / 2**53, so 0.0 and 1.0 are
    unreachable and dyadic thresholds such as 0.5 can never tie exactly.
    """
    k = rng.integers(0, 1 << 53, size=size, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) * _INV_2_53
