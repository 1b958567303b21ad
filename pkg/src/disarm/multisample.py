"""Multi-sample bound estimators: VIMCO and the local pairwise estimator.

The bound is log-mean-exp of importance weights. VIMCO centers each
sample's learning signal with the leave-one-out log-mean of the others.
The pairwise estimator draws K antithetic pairs and applies the pair
coefficient locally to each sample, with a four-term signal built from the
2K cached weights; no weight is ever evaluated more than once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bernoulli import (
    AntitheticPair,
    as_logits,
    conditional_score_expectation,
    sample_antithetic,
)
from .estimators import GradientEstimate
from .numerics import log_mean_exp, logsumexp, logsumexp_excluding
from .numerics import sigmoid

__all__ = [
    "MultiSampleBatch",
    "draw_multisample_batch",
    "multi_sample_bound",
    "vimco",
    "disarm_multisample",
]


@dataclass(frozen=True)
class MultiSampleBatch:
    """K antithetic pairs with their 2K cached log importance weights."""

    pairs: tuple[AntitheticPair, ...]
    log_w: np.ndarray
    log_w_tilde: np.ndarray

    def __post_init__(self):
        k = len(self.pairs)
        if k == 0:
            raise ValueError("a batch needs at least one pair")
        if self.log_w.shape != (k,) or self.log_w_tilde.shape != (k,):
            raise ValueError("cached weights must hold one value per pair side")
        if not (np.all(np.isfinite(self.log_w)) and np.all(np.isfinite(self.log_w_tilde))):
            raise ValueError("log weights must be finite")

    @property
    def pair_count(self) -> int:
        return len(self.pairs)


def draw_multisample_batch(logits, log_weight_fn, pair_count, rng) -> MultiSampleBatch:
    """Draw K pairs against one logit vector and cache all 2K log weights."""
    a = as_logits(logits)
    if pair_count < 1:
        raise ValueError("pair_count must be positive")
    pairs = tuple(sample_antithetic(a, rng) for _ in range(pair_count))
    log_w = np.array([float(log_weight_fn(p.b)) for p in pairs])
    log_w_tilde = np.array([float(log_weight_fn(p.b_tilde)) for p in pairs])
    return MultiSampleBatch(pairs=pairs, log_w=log_w, log_w_tilde=log_w_tilde)


def multi_sample_bound(log_w) -> float:
    """log-mean-exp of the weights; the single-weight case is the plain bound."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.size == 0:
        raise ValueError("the bound over zero weights is undefined")
    return float(log_mean_exp(log_w))


def vimco(logits, log_w, samples) -> GradientEstimate:
    """Leave-one-out-centered score estimate for the multi-sample bound.

    signal_k = log-mean(all weights) - log-mean(weights without k); the
    centering term has zero expectation, so the estimate stays unbiased.
    """
    a = as_logits(logits)
    log_w = np.asarray(log_w, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    n = log_w.size
    if n < 2:
        raise ValueError("leave-one-out centering needs at least two samples")
    if samples.shape != (n, a.size):
        raise ValueError(f"expected samples of shape {(n, a.size)}, got {samples.shape}")
    probs = sigmoid(a)
    lme_all = logsumexp(log_w) - math.log(n)
    partials = np.zeros(a.size)
    for k in range(n):
        lme_rest = logsumexp_excluding(log_w, k) - math.log(n - 1)
        partials += (lme_all - lme_rest) * (samples[k] - probs)
    return GradientEstimate(partials=partials, estimator_id="vimco", objective_evals=n)


def disarm_multisample(logits, batch: MultiSampleBatch) -> GradientEstimate:
    """Local pairwise estimate of the K-sample bound gradient.

    For pair k the learning signal averages the four bound values obtained
    by completing either side of the pair with either side of the remaining
    pairs; the pair coefficient then localizes it per dimension. All four
    values come from the 2K cached weights.
    """
    a = as_logits(logits)
    k_pairs = batch.pair_count
    for pair in batch.pairs:
        if pair.dim != a.size:
            raise ValueError(f"pair dim {pair.dim} does not match logits dim {a.size}")
    log_k = math.log(k_pairs)
    lw = batch.log_w
    lw_t = batch.log_w_tilde
    trunk_bound = logsumexp(lw) - log_k
    branch_bound = logsumexp(lw_t) - log_k
    partials = np.zeros(a.size)
    for k in range(k_pairs):
        swap_in_tilde = np.logaddexp(logsumexp_excluding(lw, k), lw_t[k]) - log_k
        swap_in_trunk = np.logaddexp(logsumexp_excluding(lw_t, k), lw[k]) - log_k
        signal = 0.25 * ((trunk_bound - swap_in_tilde) + (swap_in_trunk - branch_bound))
        pair = batch.pairs[k]
        partials += signal * conditional_score_expectation(a, pair.b, pair.b_tilde)
    return GradientEstimate(
        partials=partials, estimator_id="disarm_multisample", objective_evals=2 * k_pairs
    )
