"""Single-objective gradient estimators for factorial Bernoulli latents.

All estimators return the partial derivatives of E[f(b)] with respect to
the Bernoulli logits. Chaining into upstream network parameters is the
caller's job (see ``disarm.nn``), which keeps these functions pure and
network-agnostic.

The objective is only ever evaluated at discrete 0/1 vectors, exactly
``objective_evals`` times per call, and each value is reused rather than
recomputed.

Estimators
    reinforce       single sample against a constant baseline
    reinforce_loo   two independent samples, each centered by the other
    arm             antithetic pair, (2u - 1) coefficient
    disarm          antithetic pair with the uniforms integrated out;
                    coefficient (-1)**b~ * 1{b != b~} * sigmoid(|logit|),
                    exactly zero wherever the pair agrees
    interpolated    posterior-weighted blend of disarm and reinforce_loo,
                    drawing the pair antithetically with probability beta
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bernoulli import (
    AntitheticPair,
    as_logits,
    conditional_score_expectation,
    log_prob_rows,
    sample_antithetic,
    sample_bernoulli,
)
from .numerics import log_sigmoid, sigmoid

__all__ = [
    "GradientEstimate",
    "InterpolationConfig",
    "ObjectiveFunction",
    "reinforce_baseline",
    "reinforce_loo",
    "arm",
    "disarm",
    "interpolated",
    "log_pair_prob_antithetic_rows",
]


@dataclass(frozen=True)
class GradientEstimate:
    """Per-logit partials plus provenance (which estimator, how many f calls)."""

    partials: np.ndarray
    estimator_id: str
    objective_evals: int


@dataclass(frozen=True)
class InterpolationConfig:
    """Mixing weight for the interpolated estimator; beta in [0, 1]."""

    beta: float

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


class ObjectiveFunction:
    """Counting wrapper around a black-box objective.

    Checks that evaluations only happen at discrete 0/1 inputs and keeps a
    monotone call counter. The counter is a plain int; use one wrapper per
    replicate when evaluating concurrently.
    """

    def __init__(self, fn):
        self._fn = fn
        self.eval_count = 0

    def __call__(self, bits) -> float:
        bits = np.asarray(bits)
        if not np.all((bits == 0.0) | (bits == 1.0)):
            raise ValueError("objective evaluated at a non-binary input")
        self.eval_count += 1
        return float(self._fn(bits))


def _loo_partials(probs, f_b, f_bt, b, b_tilde):
    # both score terms written out; the baseline cross-terms cancel in exact arithmetic
    return 0.5 * ((f_b - f_bt) * (b - probs) + (f_bt - f_b) * (b_tilde - probs))


def reinforce_baseline(logits, objective, baseline, rng) -> GradientEstimate:
    """Single-sample score-function estimate against a constant baseline.

    The naive reference: (f(b) - baseline) * (b - sigmoid(logits)). Unbiased
    for any baseline that does not depend on the drawn sample.
    """
    a = as_logits(logits)
    b = sample_bernoulli(a, rng)
    f_b = float(objective(b))
    partials = (f_b - float(baseline)) * (b - sigmoid(a))
    return GradientEstimate(partials=partials, estimator_id="reinforce", objective_evals=1)


def reinforce_loo(logits, objective, rng) -> GradientEstimate:
    """Two independent samples, each one's signal centered by the other's value."""
    a = as_logits(logits)
    b = sample_bernoulli(a, rng)
    b_tilde = sample_bernoulli(a, rng)
    f_b = float(objective(b))
    f_bt = float(objective(b_tilde))
    partials = _loo_partials(sigmoid(a), f_b, f_bt, b, b_tilde)
    return GradientEstimate(partials=partials, estimator_id="reinforce_loo", objective_evals=2)


def arm(logits, objective, pair: AntitheticPair) -> GradientEstimate:
    """Antithetic-pair estimate with the raw uniform coefficient (2u - 1)."""
    a = as_logits(logits)
    if pair.dim != a.size:
        raise ValueError(f"pair dim {pair.dim} does not match logits dim {a.size}")
    f_b = float(objective(pair.b))
    f_bt = float(objective(pair.b_tilde))
    signal = 0.5 * (f_b - f_bt)
    partials = signal * (2.0 * pair.u - 1.0)
    return GradientEstimate(partials=partials, estimator_id="arm", objective_evals=2)


def disarm(logits, objective, pair: AntitheticPair) -> GradientEstimate:
    """Antithetic-pair estimate with the uniforms integrated out.

    Coefficient (-1)**b~ * 1{b != b~} * sigmoid(|logit|); a dimension where
    the pair agrees contributes an exact 0.0. Never higher variance than
    ``arm`` on the same pairs.
    """
    a = as_logits(logits)
    if pair.dim != a.size:
        raise ValueError(f"pair dim {pair.dim} does not match logits dim {a.size}")
    f_b = float(objective(pair.b))
    f_bt = float(objective(pair.b_tilde))
    signal = 0.5 * (f_b - f_bt)
    partials = signal * conditional_score_expectation(a, pair.b, pair.b_tilde)
    return GradientEstimate(partials=partials, estimator_id="disarm", objective_evals=2)


def log_pair_prob_antithetic_rows(logits, b, b_tilde) -> np.ndarray:
    """Row-wise log probability of (b, b~) under the antithetic pair joint.

    Per dimension: min(p, 1-p) when the bits differ; |2p - 1| for the
    agreeing pair on the majority side; probability zero (-inf) for the
    agreeing pair on the minority side. Accumulated in log space.
    """
    logits = np.asarray(logits, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    log_diff = log_sigmoid(-np.abs(logits))
    with np.errstate(divide="ignore"):
        log_same = np.log(np.tanh(0.5 * np.abs(logits)))
    majority = np.where(logits >= 0.0, 1.0, 0.0)
    per_dim = np.where(
        b != b_tilde,
        log_diff,
        np.where(b == majority, log_same, -np.inf),
    )
    return np.sum(per_dim, axis=-1)


def _antithetic_posterior(logits, b, b_tilde, beta: float) -> float:
    if beta <= 0.0:
        return 0.0
    if beta >= 1.0:
        return 1.0
    log_alt = math.log(beta) + float(log_pair_prob_antithetic_rows(logits, b, b_tilde))
    log_ind = math.log1p(-beta) + float(log_prob_rows(logits, b) + log_prob_rows(logits, b_tilde))
    if log_alt == -math.inf:
        return 0.0
    return float(math.exp(log_alt - np.logaddexp(log_alt, log_ind)))


def interpolated(logits, objective, config: InterpolationConfig, rng) -> GradientEstimate:
    """Posterior-weighted blend of the pair estimator and independent-sample LOO.

    Draws the mixture component first (one plain uniform), then the pair:
    antithetically via ``sample_antithetic`` with probability beta, otherwise
    as two ``sample_bernoulli`` calls. The realized pair reweights the two
    base estimators by Bayes rule over the per-dimension pair tables. At
    beta=0 this is exactly reinforce_loo; at beta=1 exactly disarm.
    """
    a = as_logits(logits)
    beta = float(config.beta)
    pick_antithetic = rng.random() < beta
    if pick_antithetic:
        pair = sample_antithetic(a, rng)
        b, b_tilde = pair.b, pair.b_tilde
    else:
        b = sample_bernoulli(a, rng)
        b_tilde = sample_bernoulli(a, rng)
    f_b = float(objective(b))
    f_bt = float(objective(b_tilde))
    weight = _antithetic_posterior(a, b, b_tilde, beta)
    signal = 0.5 * (f_b - f_bt)
    g_pair = signal * conditional_score_expectation(a, b, b_tilde)
    g_loo = _loo_partials(sigmoid(a), f_b, f_bt, b, b_tilde)
    partials = weight * g_pair + (1.0 - weight) * g_loo
    return GradientEstimate(partials=partials, estimator_id="interpolated", objective_evals=2)
