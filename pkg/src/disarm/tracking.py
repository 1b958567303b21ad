"""Gradient-moment tracking, metrics emission, and variance statistics.

The tracker keeps exponential moving averages of the per-parameter first
and second gradient moments (one pair per named group) and reports
variance = E[g^2] - E[g]^2, clamped at zero. The moving-average variance
is what training-time plots use; the probe reports additionally carry the
direct sample statistics from ``variance_with_se``.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = [
    "VarianceTracker",
    "MetricsWriter",
    "variance_with_se",
    "paired_variance_difference",
]


class VarianceTracker:
    """Per-group EMA of gradient moments with a shared decay rate."""

    def __init__(self, decay: float = 0.999):
        if not (0.0 < decay < 1.0):
            raise ValueError(f"decay must lie strictly inside (0, 1), got {decay}")
        self.decay = float(decay)
        self._mean: dict[str, np.ndarray] = {}
        self._second: dict[str, np.ndarray] = {}
        self._updates: dict[str, int] = {}

    def update(self, group: str, values) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        if group not in self._mean:
            self._mean[group] = np.zeros_like(v)
            self._second[group] = np.zeros_like(v)
            self._updates[group] = 0
        if v.shape != self._mean[group].shape:
            raise ValueError(f"group {group!r}: size changed between updates")
        d = self.decay
        self._mean[group] = d * self._mean[group] + (1.0 - d) * v
        self._second[group] = d * self._second[group] + (1.0 - d) * (v * v)
        self._updates[group] += 1

    def groups(self) -> list[str]:
        return list(self._mean)

    def updates(self, group: str) -> int:
        return self._updates.get(group, 0)

    def variance(self, group: str) -> np.ndarray:
        """Per-parameter EMA variance estimate, clamped at zero."""
        if group not in self._mean:
            raise KeyError(f"no updates recorded for group {group!r}")
        return np.maximum(self._second[group] - self._mean[group] ** 2, 0.0)

    def mean_variance(self, group: str) -> float:
        """Variance averaged over the group's parameters."""
        return float(np.mean(self.variance(group)))


class MetricsWriter:
    """Line-oriented JSON records, flushed per line so partial runs keep data."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def variance_with_se(samples) -> tuple[float, float]:
    """Sample variance and the standard error of that variance estimate.

    se(var) ~ sqrt((m4 - m2^2) / n) from the central moments; good enough
    for the few-standard-error margins the comparisons use.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    c = x - np.mean(x)
    m2 = float(np.mean(c**2))
    m4 = float(np.mean(c**4))
    return m2, float(np.sqrt(max(m4 - m2**2, 0.0) / n))


def paired_variance_difference(a, b) -> tuple[float, float]:
    """Var(a) - Var(b) for paired samples, with the paired standard error.

    Pairing matters: when a and b are estimates built from the same draws,
    the difference of squared deviations has far lower variance than the
    two variance estimates separately.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two 1-d sample vectors of equal length")
    d = (a - np.mean(a)) ** 2 - (b - np.mean(b)) ** 2
    return float(np.mean(d)), float(np.std(d) / np.sqrt(d.size))
