"""Numerically stable scalar/array primitives shared across the package.

Everything runs in float64. Inputs may be scalars or arrays; outputs follow
numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "logsumexp",
    "log_mean_exp",
    "logsumexp_excluding",
]


def softplus(x):
    """log(1 + exp(x)) without overflow: max(x, 0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    """log(sigmoid(x)), computed as -softplus(-x)."""
    return -softplus(np.negative(x))


def sigmoid(x):
    """Logistic function, stable on both tails (exp only sees arguments <= 0)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def logsumexp(a, axis=None):
    """log(sum(exp(a))), max-shifted. Empty input reduces to -inf."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return np.float64(-np.inf)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return np.float64(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(a, axis=None):
    """log of the arithmetic mean of exp(a) along ``axis``."""
    a = np.asarray(a, dtype=np.float64)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("log_mean_exp of an empty set is undefined")
    return logsumexp(a, axis=axis) - np.log(n)


def logsumexp_excluding(a, index):
    """logsumexp of a 1-d array with one entry left out.

    Uses the global sum minus the excluded term; falls back to a direct
    reduced logsumexp when the excluded term carries nearly all of the mass
    (the subtraction would cancel catastrophically).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("expected a 1-d array")
    if a.size <= 1:
        return np.float64(-np.inf)
    m = np.max(a)
    terms = np.exp(a - m)
    total = np.sum(terms)
    rest = total - terms[index]
    if rest <= total * 1e-6:
        return logsumexp(np.delete(a, index))
    return np.float64(m + np.log(rest))
