"""Factorial Bernoulli machinery.

A logit vector is a plain 1-d float64 array; every public entry point
validates finiteness (a non-finite logit is a hard error, not a warning).
Bits travel as float64 0/1 arrays so they can be used in arithmetic
directly.

The antithetic coupling draws one uniform vector u and sets

    b  = 1{1 - u < sigmoid(logits)}        b~ = 1{u < sigmoid(logits)}

so both marginals are Bernoulli(sigmoid(logits)) while the pair lands on
"opposite" sides of the threshold. Inequalities are strict: a draw exactly
on the threshold resolves to 0 (a measure-zero event, pinned down for
determinism). The pair also fixes the conditional mean of u given the
realized bits, which is what ``conditional_score_expectation`` returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_sigmoid, sigmoid
from .rng import open_unit_uniform

__all__ = [
    "MAX_ENUMERATION_DIM",
    "EnumerationBudgetError",
    "AntitheticPair",
    "as_logits",
    "antithetic_bits",
    "sample_antithetic",
    "sample_bernoulli",
    "log_prob",
    "log_prob_rows",
    "conditional_score_expectation",
    "enumerate_exact_gradient",
]

MAX_ENUMERATION_DIM = 20


class EnumerationBudgetError(ValueError):
    """Exact enumeration was asked for more than 2**20 outcomes."""


def as_logits(logits) -> np.ndarray:
    """Validate and return a 1-d float64 logit vector."""
    a = np.asarray(logits, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"logits must be 1-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("logits must be finite")
    return a


@dataclass(frozen=True)
class AntitheticPair:
    """Coupled sample pair with the uniforms that generated it."""

    u: np.ndarray
    b: np.ndarray
    b_tilde: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.b.shape == self.b_tilde.shape):
            raise ValueError("pair components must share one shape")

    @property
    def dim(self) -> int:
        return self.u.size


def antithetic_bits(u, probs):
    """Coupled bit pair from shared uniforms: b = 1{1-u < p}, b~ = 1{u < p}."""
    b = (1.0 - u < probs).astype(np.float64)
    b_tilde = (u < probs).astype(np.float64)
    return b, b_tilde


def sample_antithetic(logits, rng) -> AntitheticPair:
    """Draw one antithetic pair; marginally each side is Bernoulli(sigmoid(logits)).

    Consuming the same generator state twice replays the identical pair.
    """
    a = as_logits(logits)
    u = open_unit_uniform(rng, a.size)
    b, b_tilde = antithetic_bits(u, sigmoid(a))
    return AntitheticPair(u=u, b=b, b_tilde=b_tilde)


def sample_bernoulli(logits, rng) -> np.ndarray:
    """One independent factorial Bernoulli sample, b = 1{u < sigmoid(logits)}."""
    a = as_logits(logits)
    u = open_unit_uniform(rng, a.size)
    return (u < sigmoid(a)).astype(np.float64)


def log_prob_rows(logits, bits) -> np.ndarray:
    """Row-wise log probability of bit rows under a factorial Bernoulli.

    Shapes broadcast; the sum runs over the last axis. Computed through the
    stable log-sigmoid (-softplus) so extreme logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    terms = bits * log_sigmoid(logits) + (1.0 - bits) * log_sigmoid(np.negative(logits))
    return np.sum(terms, axis=-1)


def log_prob(logits, bits) -> float:
    """log q(bits) for a single bit vector under the given logits."""
    a = as_logits(logits)
    b = np.asarray(bits, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError(f"bit vector shape {b.shape} does not match logits {a.shape}")
    return float(log_prob_rows(a, b))


def conditional_score_expectation(logit, b, b_tilde):
    """2*E[u | b, b~] - 1 under the antithetic coupling.

    Exactly zero whenever the pair agrees, otherwise (-1)**b~ * sigmoid(|logit|).
    Broadcasts over arrays; scalar inputs give a 0-d array.
    """
    logit = np.asarray(logit, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    sign = 1.0 - 2.0 * b_tilde
    return np.where(b != b_tilde, sign * sigmoid(np.abs(logit)), 0.0)


def enumerate_exact_gradient(logits, objective) -> np.ndarray:
    """Exact d/dlogits of E[objective(b)] by summing every binary outcome.

    Enumerates bit patterns in lexicographic order and accumulates with
    Kahan compensation; the oracle has to be more accurate than the
    estimators it judges. Refuses dimensions above ``MAX_ENUMERATION_DIM``.
    """
    a = as_logits(logits)
    dim = a.size
    if dim > MAX_ENUMERATION_DIM:
        raise EnumerationBudgetError(
            f"dim={dim} exceeds the enumeration budget of {MAX_ENUMERATION_DIM}"
        )
    probs = sigmoid(a)
    shifts = np.arange(dim - 1, -1, -1)
    total = np.zeros(dim)
    carry = np.zeros(dim)
    for pattern in range(1 << dim):
        bits = ((pattern >> shifts) & 1).astype(np.float64)
        weight = float(np.exp(log_prob_rows(a, bits)))
        term = (weight * float(objective(bits))) * (bits - probs)
        y = term - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total
