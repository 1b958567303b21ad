"""Objectives hosted on the network stack.

Covers the single-bit toy problem, a factorial-Bernoulli VAE trained on the
per-sample bound, its T-layer hierarchical variant (shared-uniform trunk
with a per-layer antithetic branch), and multi-sample training with either
K coupled pairs or VIMCO over independent samples.

Conventions shared by every step function:

* gradients are ascent-direction bound gradients, averaged over the batch;
* the posterior-logit gradient comes from the chosen estimator and is
  chained into encoder parameters through the backward tape;
* decoder and prior parameters get direct gradients evaluated at the trunk
  sample only (one Monte Carlo sample for the pathwise term);
* a non-finite objective aborts the step with ``TrainingDiverged``.

The T=1 hierarchical step reduces bit-for-bit to the single-layer disarm
step on a shared generator stream; the helpers here are written (and kept)
so that both paths execute identical floating-point operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bernoulli import (
    antithetic_bits,
    as_logits,
    conditional_score_expectation,
    log_prob_rows,
)
from .estimators import InterpolationConfig, log_pair_prob_antithetic_rows
from .nn import AdamState, DenseNetwork, SgdState, flatten_gradients, optimizer_step
from .numerics import sigmoid
from .rng import open_unit_uniform

__all__ = [
    "ESTIMATOR_IDS",
    "MULTISAMPLE_METHODS",
    "TrainingDiverged",
    "toy_value",
    "toy_exact_gradient",
    "toy_expected_value",
    "BernoulliVAE",
    "HierarchicalVAE",
    "VaeTrainState",
    "HierarchicalTrainState",
    "StepResult",
    "HierarchicalStepResult",
    "elbo_value",
    "compute_elbo_gradients",
    "elbo_step",
    "compute_hierarchical_gradients",
    "hierarchical_disarm_step",
    "compute_multisample_gradients",
    "multisample_step",
    "importance_log_weights",
    "evaluate_multisample_bound",
]

ESTIMATOR_IDS = ("reinforce", "reinforce_loo", "arm", "disarm", "interpolated")
MULTISAMPLE_METHODS = ("disarm", "vimco")


class TrainingDiverged(RuntimeError):
    """The step produced a non-finite objective; training must stop."""


# --------------------------------------------------------------------------
# Toy problem: one Bernoulli bit, payoff (b - target)**2, maximized over the
# logit. Hardest exactly at target 0.5 where the two payoffs coincide.


def _check_target(target: float) -> None:
    if not (0.0 < float(target) < 1.0):
        raise ValueError(f"target must lie strictly inside (0, 1), got {target}")


def toy_value(target, bit) -> float:
    """(bit - target)**2 for a single bit."""
    _check_target(target)
    return float((float(bit) - float(target)) ** 2)


def toy_exact_gradient(target, phi) -> float:
    """Closed form d/dphi of E[(b - target)**2], b ~ Bernoulli(sigmoid(phi))."""
    _check_target(target)
    s = float(sigmoid(phi))
    return (1.0 - 2.0 * float(target)) * s * (1.0 - s)


def toy_expected_value(target, phi) -> float:
    """Exact E[(b - target)**2] at the current logit."""
    _check_target(target)
    s = float(sigmoid(phi))
    t = float(target)
    return s * (1.0 - t) ** 2 + (1.0 - s) * t**2


# --------------------------------------------------------------------------
# Models.


class BernoulliVAE:
    """Single stochastic layer: encoder -> latent logits, decoder -> pixel logits."""

    def __init__(self, encoder: DenseNetwork, decoder: DenseNetwork, prior_logits):
        prior = as_logits(prior_logits)
        if encoder.output_dim != decoder.input_dim or encoder.output_dim != prior.size:
            raise ValueError("encoder output, decoder input and prior must share the latent dim")
        if decoder.output_dim != encoder.input_dim:
            raise ValueError("decoder output must match the encoder input (pixel) dim")
        self.encoder = encoder
        self.decoder = decoder
        self.prior_logits = prior

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def pixel_dim(self) -> int:
        return self.decoder.output_dim

    def posterior_logits(self, enc_input):
        return self.encoder.forward(np.asarray(enc_input, dtype=np.float64))


class HierarchicalVAE:
    """T stochastic layers; layer t is conditioned on the sample below it.

    encoders[t] maps the layer-t input (the data for t=0, otherwise the
    previous layer's bits) to that layer's latent logits; decoders[t] maps
    the layer's bits back down, with decoders[0] producing pixel logits.
    """

    def __init__(self, encoders, decoders, prior_logits):
        if not encoders or len(encoders) != len(decoders):
            raise ValueError("need one encoder and one decoder per stochastic layer")
        for t, (enc, dec) in enumerate(zip(encoders, decoders)):
            if enc.output_dim != dec.input_dim:
                raise ValueError(f"layer {t}: encoder output and decoder input disagree")
            if dec.output_dim != enc.input_dim:
                raise ValueError(f"layer {t}: decoder output and encoder input disagree")
            if t > 0 and enc.input_dim != encoders[t - 1].output_dim:
                raise ValueError(f"layer {t}: chain dimensions do not compose")
        prior = as_logits(prior_logits)
        if prior.size != encoders[-1].output_dim:
            raise ValueError("prior must match the top layer's latent dim")
        self.encoders = list(encoders)
        self.decoders = list(decoders)
        self.prior_logits = prior

    @property
    def num_layers(self) -> int:
        return len(self.encoders)

    @property
    def latent_dims(self) -> tuple:
        return tuple(enc.output_dim for enc in self.encoders)

    @property
    def pixel_dim(self) -> int:
        return self.decoders[0].output_dim


# --------------------------------------------------------------------------
# Shared bound arithmetic. Both the single-layer and the flattened
# multi-sample paths call _log_weight_rows so their floating-point op order
# matches exactly; the hierarchical accumulation below reproduces the same
# order for T=1.


def _log_weight_rows(x, pixel_logits, prior_logits, posterior_logits, b):
    """Row-wise log p(x|b) + log p(b) - log q(b): the per-sample bound."""
    return (
        log_prob_rows(pixel_logits, x)
        + log_prob_rows(prior_logits, b)
        - log_prob_rows(posterior_logits, b)
    )


def _hier_log_weight_rows(hvae, x, latents, posteriors, want_tapes: bool):
    """Row-wise log p(x, latents) - log q(latents | x) for one latent config.

    ``posteriors[t]`` must be the logits the t-th layer was actually sampled
    against (trunk logits for unchanged layers, branch logits otherwise).
    """
    targets = [x] + latents[:-1]
    tapes = [] if want_tapes else None
    pixel_logits = [] if want_tapes else None
    total = None
    for t, dec in enumerate(hvae.decoders):
        out, tape = dec.forward(latents[t])
        ll = log_prob_rows(out, targets[t])
        total = ll if total is None else total + ll
        if want_tapes:
            tapes.append(tape)
            pixel_logits.append(out)
    total = total + log_prob_rows(hvae.prior_logits, latents[-1])
    for t, post in enumerate(posteriors):
        total = total - log_prob_rows(post, latents[t])
    return total, tapes, pixel_logits


def elbo_value(vae: BernoulliVAE, x, b, enc_input=None) -> float:
    """Per-sample bound for one datum; the encoder sees ``enc_input`` (default x)."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape != (vae.pixel_dim,):
        raise ValueError(f"expected a single {vae.pixel_dim}-pixel datum, got {x.shape}")
    if b.shape != (vae.latent_dim,):
        raise ValueError(f"expected a single {vae.latent_dim}-bit latent, got {b.shape}")
    enc = x if enc_input is None else np.asarray(enc_input, dtype=np.float64)
    if enc.shape != (vae.encoder.input_dim,):
        raise ValueError("encoder input shape mismatch")
    posterior, _ = vae.posterior_logits(enc[None, :])
    pix, _ = vae.decoder.forward(b[None, :])
    return float(_log_weight_rows(x[None, :], pix, vae.prior_logits, posterior, b[None, :])[0])


# --------------------------------------------------------------------------
# Training states and step results.


@dataclass
class VaeTrainState:
    encoder_opt: AdamState
    decoder_opt: AdamState
    prior_opt: SgdState
    baseline: float = 0.0
    baseline_decay: float = 0.99

    @classmethod
    def create(cls, adam_lr: float = 1e-4, sgd_lr: float = 1e-2) -> "VaeTrainState":
        return cls(AdamState(adam_lr), AdamState(adam_lr), SgdState(sgd_lr))


@dataclass
class HierarchicalTrainState:
    encoder_opts: list
    decoder_opts: list
    prior_opt: SgdState

    @classmethod
    def create(cls, num_layers: int, adam_lr: float = 1e-4, sgd_lr: float = 1e-2):
        return cls(
            [AdamState(adam_lr) for _ in range(num_layers)],
            [AdamState(adam_lr) for _ in range(num_layers)],
            SgdState(sgd_lr),
        )


@dataclass
class StepResult:
    """Gradients and diagnostics from one (single-layer or multi-sample) step."""

    objective: float
    logit_grad: np.ndarray
    encoder_grads: list
    decoder_grads: list
    prior_grad: np.ndarray
    objective_evals: int

    def grad_groups(self) -> dict:
        return {
            "encoder": flatten_gradients(self.encoder_grads),
            "decoder": flatten_gradients(self.decoder_grads),
            "prior": np.asarray(self.prior_grad, dtype=np.float64),
        }


@dataclass
class HierarchicalStepResult:
    objective: float
    layer_logit_grads: list
    encoder_grads: list
    decoder_grads: list
    prior_grad: np.ndarray
    objective_evals: int

    def grad_groups(self) -> dict:
        groups = {}
        for t, g in enumerate(self.encoder_grads):
            groups[f"encoder_{t}"] = flatten_gradients(g)
        for t, g in enumerate(self.decoder_grads):
            groups[f"decoder_{t}"] = flatten_gradients(g)
        groups["prior"] = np.asarray(self.prior_grad, dtype=np.float64)
        return groups


def _check_batch(vae, x, enc_input):
    x = np.asarray(x, dtype=np.float64)
    enc_input = np.asarray(enc_input, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != vae.pixel_dim:
        raise ValueError(f"expected an (n, {vae.pixel_dim}) pixel batch, got {x.shape}")
    first = vae.encoders[0] if isinstance(vae, HierarchicalVAE) else vae.encoder
    if enc_input.shape != (x.shape[0], first.input_dim):
        raise ValueError("encoder input batch does not line up with the pixel batch")
    return x, enc_input


def _require_finite(objective: float, context: str) -> None:
    if not math.isfinite(objective):
        raise TrainingDiverged(f"non-finite objective in {context}: {objective}")


# --------------------------------------------------------------------------
# Single-layer step.


def compute_elbo_gradients(
    vae: BernoulliVAE,
    x,
    enc_input,
    estimator: str,
    rng,
    *,
    baseline: float = 0.0,
    beta: float | None = None,
) -> StepResult:
    """Gradients for one mini-batch without touching any parameters.

    The estimator id picks how the posterior-logit gradient is formed;
    ``baseline`` only matters for plain reinforce and ``beta`` only for the
    interpolated estimator. arm and disarm consume the generator stream
    identically, so on a shared stream they see the same sample pairs.
    """
    if estimator not in ESTIMATOR_IDS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATOR_IDS}")
    x, enc_input = _check_batch(vae, x, enc_input)
    n = x.shape[0]
    posterior, enc_tape = vae.posterior_logits(enc_input)
    probs = sigmoid(posterior)

    if estimator in ("arm", "disarm"):
        u = open_unit_uniform(rng, posterior.shape)
        b, b_tilde = antithetic_bits(u, probs)
        pix, dec_tape = vae.decoder.forward(b)
        f_b = _log_weight_rows(x, pix, vae.prior_logits, posterior, b)
        pix_bt, _ = vae.decoder.forward(b_tilde)
        f_bt = _log_weight_rows(x, pix_bt, vae.prior_logits, posterior, b_tilde)
        signal = 0.5 * (f_b - f_bt)
        if estimator == "arm":
            coeff = 2.0 * u - 1.0
        else:
            coeff = conditional_score_expectation(posterior, b, b_tilde)
        logit_grad = signal[:, None] * coeff
        trunk, trunk_pix, trunk_values, evals = b, pix, f_b, 2 * n
    elif estimator == "reinforce_loo":
        u1 = open_unit_uniform(rng, posterior.shape)
        u2 = open_unit_uniform(rng, posterior.shape)
        b = (u1 < probs).astype(np.float64)
        b_tilde = (u2 < probs).astype(np.float64)
        pix, dec_tape = vae.decoder.forward(b)
        f_b = _log_weight_rows(x, pix, vae.prior_logits, posterior, b)
        pix_bt, _ = vae.decoder.forward(b_tilde)
        f_bt = _log_weight_rows(x, pix_bt, vae.prior_logits, posterior, b_tilde)
        diff = (f_b - f_bt)[:, None]
        logit_grad = 0.5 * (diff * (b - probs) + (-diff) * (b_tilde - probs))
        trunk, trunk_pix, trunk_values, evals = b, pix, f_b, 2 * n
    elif estimator == "reinforce":
        u = open_unit_uniform(rng, posterior.shape)
        b = (u < probs).astype(np.float64)
        pix, dec_tape = vae.decoder.forward(b)
        f_b = _log_weight_rows(x, pix, vae.prior_logits, posterior, b)
        logit_grad = (f_b - float(baseline))[:, None] * (b - probs)
        trunk, trunk_pix, trunk_values, evals = b, pix, f_b, n
    else:  # interpolated
        if beta is None:
            raise ValueError("the interpolated estimator needs a beta")
        cfg = InterpolationConfig(float(beta))
        pick = (rng.random(n) < cfg.beta)[:, None]
        u1 = open_unit_uniform(rng, posterior.shape)
        u2 = open_unit_uniform(rng, posterior.shape)
        b_anti, bt_anti = antithetic_bits(u1, probs)
        b = np.where(pick, b_anti, (u1 < probs).astype(np.float64))
        b_tilde = np.where(pick, bt_anti, (u2 < probs).astype(np.float64))
        pix, dec_tape = vae.decoder.forward(b)
        f_b = _log_weight_rows(x, pix, vae.prior_logits, posterior, b)
        pix_bt, _ = vae.decoder.forward(b_tilde)
        f_bt = _log_weight_rows(x, pix_bt, vae.prior_logits, posterior, b_tilde)
        if cfg.beta <= 0.0:
            weight = np.zeros(n)
        elif cfg.beta >= 1.0:
            weight = np.ones(n)
        else:
            log_alt = math.log(cfg.beta) + log_pair_prob_antithetic_rows(posterior, b, b_tilde)
            log_ind = math.log1p(-cfg.beta) + (
                log_prob_rows(posterior, b) + log_prob_rows(posterior, b_tilde)
            )
            weight = np.exp(log_alt - np.logaddexp(log_alt, log_ind))
        signal = 0.5 * (f_b - f_bt)
        g_pair = signal[:, None] * conditional_score_expectation(posterior, b, b_tilde)
        diff = (f_b - f_bt)[:, None]
        g_loo = 0.5 * (diff * (b - probs) + (-diff) * (b_tilde - probs))
        logit_grad = weight[:, None] * g_pair + (1.0 - weight[:, None]) * g_loo
        trunk, trunk_pix, trunk_values, evals = b, pix, f_b, 2 * n

    objective = float(np.mean(trunk_values))
    _require_finite(objective, "elbo step")
    encoder_grads, _ = vae.encoder.backward(enc_tape, logit_grad / n)
    decoder_grads, _ = vae.decoder.backward(dec_tape, (x - sigmoid(trunk_pix)) / n)
    prior_grad = np.mean(trunk - sigmoid(vae.prior_logits), axis=0)
    return StepResult(
        objective=objective,
        logit_grad=logit_grad,
        encoder_grads=encoder_grads,
        decoder_grads=decoder_grads,
        prior_grad=prior_grad,
        objective_evals=evals,
    )


def elbo_step(
    vae: BernoulliVAE,
    x,
    enc_input,
    estimator: str,
    state: VaeTrainState,
    rng,
    *,
    beta: float | None = None,
) -> StepResult:
    """One training step: compute gradients, apply ascent updates."""
    res = compute_elbo_gradients(
        vae, x, enc_input, estimator, rng, baseline=state.baseline, beta=beta
    )
    vae.encoder.assign_params(
        optimizer_step(
            state.encoder_opt, vae.encoder.params(), vae.encoder.grads_as_params(res.encoder_grads)
        )
    )
    vae.decoder.assign_params(
        optimizer_step(
            state.decoder_opt, vae.decoder.params(), vae.decoder.grads_as_params(res.decoder_grads)
        )
    )
    vae.prior_logits = optimizer_step(state.prior_opt, [vae.prior_logits], [res.prior_grad])[0]
    if estimator == "reinforce":
        state.baseline = (
            state.baseline_decay * state.baseline + (1.0 - state.baseline_decay) * res.objective
        )
    return res


# --------------------------------------------------------------------------
# Hierarchical step: shared uniforms build the trunk; each layer flips its
# own bits antithetically, resamples the branch above it, and contributes a
# pair-coefficient gradient to its posterior logits. The trunk value is
# evaluated once and reused, so a T-layer step costs T+1 bound evaluations.


def compute_hierarchical_gradients(
    hvae: HierarchicalVAE,
    x,
    enc_input,
    rng,
    *,
    coefficient: str = "disarm",
) -> HierarchicalStepResult:
    if coefficient not in ("disarm", "arm"):
        raise ValueError(f"hierarchical coefficient must be disarm or arm, got {coefficient!r}")
    x, enc_input = _check_batch(hvae, x, enc_input)
    n = x.shape[0]
    num_layers = hvae.num_layers

    posteriors, enc_tapes, uniforms, trunk, flipped = [], [], [], [], []
    parent = enc_input
    for enc in hvae.encoders:
        logits_t, tape_t = enc.forward(parent)
        u_t = open_unit_uniform(rng, logits_t.shape)
        b_t, bt_t = antithetic_bits(u_t, sigmoid(logits_t))
        posteriors.append(logits_t)
        enc_tapes.append(tape_t)
        uniforms.append(u_t)
        trunk.append(b_t)
        flipped.append(bt_t)
        parent = b_t

    f_trunk, dec_tapes, pixel_logits = _hier_log_weight_rows(
        hvae, x, trunk, posteriors, want_tapes=True
    )

    layer_logit_grads = []
    for t in range(num_layers):
        branch = [flipped[t]]
        branch_posts = []
        parent = flipped[t]
        for s in range(t + 1, num_layers):
            logits_s, _ = hvae.encoders[s].forward(parent)
            u_s = open_unit_uniform(rng, logits_s.shape)
            b_s = (u_s < sigmoid(logits_s)).astype(np.float64)
            branch.append(b_s)
            branch_posts.append(logits_s)
            parent = b_s
        config = trunk[:t] + branch
        config_posts = posteriors[: t + 1] + branch_posts
        f_branch, _, _ = _hier_log_weight_rows(hvae, x, config, config_posts, want_tapes=False)
        signal = 0.5 * (f_trunk - f_branch)
        if coefficient == "disarm":
            coeff = conditional_score_expectation(posteriors[t], trunk[t], flipped[t])
        else:
            coeff = 2.0 * uniforms[t] - 1.0
        layer_logit_grads.append(signal[:, None] * coeff)

    objective = float(np.mean(f_trunk))
    _require_finite(objective, "hierarchical step")
    encoder_grads = [
        hvae.encoders[t].backward(enc_tapes[t], layer_logit_grads[t] / n)[0]
        for t in range(num_layers)
    ]
    targets = [x] + trunk[:-1]
    decoder_grads = [
        hvae.decoders[t].backward(dec_tapes[t], (targets[t] - sigmoid(pixel_logits[t])) / n)[0]
        for t in range(num_layers)
    ]
    prior_grad = np.mean(trunk[-1] - sigmoid(hvae.prior_logits), axis=0)
    return HierarchicalStepResult(
        objective=objective,
        layer_logit_grads=layer_logit_grads,
        encoder_grads=encoder_grads,
        decoder_grads=decoder_grads,
        prior_grad=prior_grad,
        objective_evals=(num_layers + 1) * n,
    )


def hierarchical_disarm_step(
    hvae: HierarchicalVAE,
    x,
    enc_input,
    state: HierarchicalTrainState,
    rng,
    *,
    coefficient: str = "disarm",
) -> HierarchicalStepResult:
    res = compute_hierarchical_gradients(hvae, x, enc_input, rng, coefficient=coefficient)
    for t, enc in enumerate(hvae.encoders):
        enc.assign_params(
            optimizer_step(
                state.encoder_opts[t], enc.params(), enc.grads_as_params(res.encoder_grads[t])
            )
        )
    for t, dec in enumerate(hvae.decoders):
        dec.assign_params(
            optimizer_step(
                state.decoder_opts[t], dec.params(), dec.grads_as_params(res.decoder_grads[t])
            )
        )
    hvae.prior_logits = optimizer_step(state.prior_opt, [hvae.prior_logits], [res.prior_grad])[0]
    return res


# --------------------------------------------------------------------------
# Multi-sample step.


def _rows_logsumexp(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def _rows_logsumexp_excluding(a: np.ndarray, index: int) -> np.ndarray:
    """Row-wise logsumexp with one column left out (log-diff with fallback)."""
    if a.shape[1] <= 1:
        return np.full(a.shape[0], -np.inf)
    m = np.max(a, axis=1)
    terms = np.exp(a - m[:, None])
    total = np.sum(terms, axis=1)
    rest = total - terms[:, index]
    bad = rest <= total * 1e-6
    out = m + np.log(np.where(bad, 1.0, rest))
    if np.any(bad):
        reduced = np.delete(a[bad], index, axis=1)
        mm = np.max(reduced, axis=1)
        out[bad] = mm + np.log(np.sum(np.exp(reduced - mm[:, None]), axis=1))
    return out


def _flat_log_weight_rows(vae: BernoulliVAE, x, samples, posterior, want_tape: bool):
    """log w for (n, k, latent) samples; the decoder runs on the flat block."""
    n, k, latent = samples.shape
    flat = samples.reshape(n * k, latent)
    pix, tape = vae.decoder.forward(flat)
    x_rep = np.repeat(x, k, axis=0)
    post_rep = np.repeat(posterior, k, axis=0)
    values = _log_weight_rows(x_rep, pix, vae.prior_logits, post_rep, flat)
    return values.reshape(n, k), (tape if want_tape else None), pix, x_rep


def compute_multisample_gradients(
    vae: BernoulliVAE,
    x,
    enc_input,
    pair_count: int,
    method: str,
    rng,
) -> StepResult:
    """Multi-sample bound gradients: K coupled pairs or VIMCO on 2K samples.

    Posterior-logit gradients come from the chosen multi-sample estimator;
    decoder and prior get direct bound gradients (normalized-importance-
    weighted over the trunk samples for the pairwise method, over all 2K
    samples for VIMCO). The reported objective is the 2K-sample bound for
    both methods so they are comparable at equal computation.
    """
    if method not in MULTISAMPLE_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {MULTISAMPLE_METHODS}")
    if pair_count < 1:
        raise ValueError("pair_count must be positive")
    x, enc_input = _check_batch(vae, x, enc_input)
    n = x.shape[0]
    posterior, enc_tape = vae.posterior_logits(enc_input)
    probs = sigmoid(posterior)
    latent = posterior.shape[1]

    if method == "disarm":
        k_pairs = pair_count
        u = open_unit_uniform(rng, (n, k_pairs, latent))
        b, b_tilde = antithetic_bits(u, probs[:, None, :])
        lw, dec_tape, pix, x_rep = _flat_log_weight_rows(vae, x, b, posterior, want_tape=True)
        lw_t, _, _, _ = _flat_log_weight_rows(vae, x, b_tilde, posterior, want_tape=False)
        log_k = math.log(k_pairs)
        trunk_bound = _rows_logsumexp(lw) - log_k
        branch_bound = _rows_logsumexp(lw_t) - log_k
        logit_grad = np.zeros((n, latent))
        for k in range(k_pairs):
            swap_in_tilde = np.logaddexp(_rows_logsumexp_excluding(lw, k), lw_t[:, k]) - log_k
            swap_in_trunk = np.logaddexp(_rows_logsumexp_excluding(lw_t, k), lw[:, k]) - log_k
            signal = 0.25 * ((trunk_bound - swap_in_tilde) + (swap_in_trunk - branch_bound))
            coeff = conditional_score_expectation(posterior, b[:, k, :], b_tilde[:, k, :])
            logit_grad = logit_grad + signal[:, None] * coeff
        weights = np.exp(lw - _rows_logsumexp(lw)[:, None])
        dec_cot = (weights.reshape(n * k_pairs, 1) * (x_rep - sigmoid(pix))) / n
        prior_grad = np.mean(
            np.sum(weights[:, :, None] * (b - sigmoid(vae.prior_logits)), axis=1), axis=0
        )
        reported = float(
            np.mean(_rows_logsumexp(np.concatenate([lw, lw_t], axis=1)) - math.log(2 * k_pairs))
        )
        evals = 2 * k_pairs * n
    else:  # vimco on 2K independent samples
        count = 2 * pair_count
        u = open_unit_uniform(rng, (n, count, latent))
        b = (u < probs[:, None, :]).astype(np.float64)
        lw, dec_tape, pix, x_rep = _flat_log_weight_rows(vae, x, b, posterior, want_tape=True)
        bound_all = _rows_logsumexp(lw) - math.log(count)
        logit_grad = np.zeros((n, latent))
        for k in range(count):
            rest = _rows_logsumexp_excluding(lw, k) - math.log(count - 1)
            logit_grad = logit_grad + (bound_all - rest)[:, None] * (b[:, k, :] - probs)
        weights = np.exp(lw - _rows_logsumexp(lw)[:, None])
        dec_cot = (weights.reshape(n * count, 1) * (x_rep - sigmoid(pix))) / n
        prior_grad = np.mean(
            np.sum(weights[:, :, None] * (b - sigmoid(vae.prior_logits)), axis=1), axis=0
        )
        reported = float(np.mean(bound_all))
        evals = count * n

    _require_finite(reported, "multi-sample step")
    encoder_grads, _ = vae.encoder.backward(enc_tape, logit_grad / n)
    decoder_grads, _ = vae.decoder.backward(dec_tape, dec_cot)
    return StepResult(
        objective=reported,
        logit_grad=logit_grad,
        encoder_grads=encoder_grads,
        decoder_grads=decoder_grads,
        prior_grad=prior_grad,
        objective_evals=evals,
    )


def multisample_step(
    vae: BernoulliVAE,
    x,
    enc_input,
    pair_count: int,
    method: str,
    state: VaeTrainState,
    rng,
) -> StepResult:
    res = compute_multisample_gradients(vae, x, enc_input, pair_count, method, rng)
    vae.encoder.assign_params(
        optimizer_step(
            state.encoder_opt, vae.encoder.params(), vae.encoder.grads_as_params(res.encoder_grads)
        )
    )
    vae.decoder.assign_params(
        optimizer_step(
            state.decoder_opt, vae.decoder.params(), vae.decoder.grads_as_params(res.decoder_grads)
        )
    )
    vae.prior_logits = optimizer_step(state.prior_opt, [vae.prior_logits], [res.prior_grad])[0]
    return res


# --------------------------------------------------------------------------
# Evaluation bound.


def importance_log_weights(model, x, enc_input, count: int, rng) -> np.ndarray:
    """(n, count) log importance weights from fresh posterior samples."""
    if count < 1:
        raise ValueError("count must be positive")
    x, enc_input = _check_batch(model, x, enc_input)
    n = x.shape[0]
    if isinstance(model, BernoulliVAE):
        posterior, _ = model.posterior_logits(enc_input)
        probs = sigmoid(posterior)
        u = open_unit_uniform(rng, (n, count, posterior.shape[1]))
        b = (u < probs[:, None, :]).astype(np.float64)
        lw, _, _, _ = _flat_log_weight_rows(model, x, b, posterior, want_tape=False)
        return lw
    x_rep = np.repeat(x, count, axis=0)
    parent = np.repeat(enc_input, count, axis=0)
    latents, posts = [], []
    for enc in model.encoders:
        logits_t, _ = enc.forward(parent)
        u_t = open_unit_uniform(rng, logits_t.shape)
        b_t = (u_t < sigmoid(logits_t)).astype(np.float64)
        latents.append(b_t)
        posts.append(logits_t)
        parent = b_t
    lw, _, _ = _hier_log_weight_rows(model, x_rep, latents, posts, want_tapes=False)
    return lw.reshape(n, count)


def evaluate_multisample_bound(model, x, enc_input, count: int, rng) -> float:
    """Mean (over data) of the count-sample bound; used for held-out reporting."""
    lw = importance_log_weights(model, x, enc_input, count, rng)
    return float(np.mean(_rows_logsumexp(lw) - math.log(count)))
