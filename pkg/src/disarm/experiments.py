"""Experiment drivers and the run() entry point.

One experiment per invocation. Every run writes, under its output
directory:

    config.json     the effective configuration (after overrides)
    metrics.jsonl   line-oriented records; deterministic given (config, seed)
    timing.jsonl    wall-clock sidecar (step, wall_ms); never deterministic
    summary.json    final summary (includes total wall time)
    *.ckpt          checkpoints at the configured interval plus final

Replicate-level parallelism (probe gradient draws) honours the
DISARM_NUM_THREADS environment variable; results merge in a fixed order,
so the thread count never changes any output values.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bernoulli import as_logits, sample_antithetic
from .config import ConfigError, ExperimentConfig
from .data import binarize, center, load_idx_images, synthetic_blob_images
from .estimators import (
    GradientEstimate,
    InterpolationConfig,
    arm,
    disarm,
    interpolated,
    reinforce_baseline,
    reinforce_loo,
)
from .nn import (
    CheckpointError,
    DenseNetwork,
    flatten_gradients,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import sigmoid
from .rng import make_rng, split_rng
from .tracking import MetricsWriter, VarianceTracker
from .vae import (
    BernoulliVAE,
    HierarchicalTrainState,
    HierarchicalVAE,
    TrainingDiverged,
    VaeTrainState,
    compute_elbo_gradients,
    elbo_step,
    evaluate_multisample_bound,
    hierarchical_disarm_step,
    multisample_step,
    toy_expected_value,
    toy_value,
)

__all__ = [
    "THREAD_ENV_VAR",
    "thread_count",
    "single_estimate",
    "RunArtifacts",
    "run",
    "evaluate_checkpoint",
]

THREAD_ENV_VAR = "DISARM_NUM_THREADS"


def thread_count() -> int:
    """Worker threads for replicate-level parallelism (default 1)."""
    raw = os.environ.get(THREAD_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREAD_ENV_VAR} must be an integer, got {raw!r}") from None


def single_estimate(
    estimator: str,
    logits,
    objective,
    rng,
    *,
    baseline: float = 0.0,
    beta: float = 0.5,
) -> GradientEstimate:
    """Dispatch one logit-gradient estimate by estimator id."""
    if estimator == "reinforce":
        return reinforce_baseline(logits, objective, baseline, rng)
    if estimator == "reinforce_loo":
        return reinforce_loo(logits, objective, rng)
    if estimator == "arm":
        return arm(logits, objective, sample_antithetic(logits, rng))
    if estimator == "disarm":
        return disarm(logits, objective, sample_antithetic(logits, rng))
    if estimator == "interpolated":
        return interpolated(logits, objective, InterpolationConfig(beta), rng)
    raise ConfigError(f"unknown estimator {estimator!r}")


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_path: Path
    timing_path: Path
    summary_path: Path
    summary: dict


def _parallel_map(fn, items):
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Data and model construction.


def _load_dataset(cfg: ExperimentConfig):
    if cfg.train_images is not None:
        train = load_idx_images(cfg.train_images)
        test = load_idx_images(cfg.test_images) if cfg.test_images is not None else None
    else:
        train = synthetic_blob_images(cfg.synthetic_count, cfg.synthetic_side, cfg.data_seed)
        test = (
            synthetic_blob_images(cfg.synthetic_test_count, cfg.synthetic_side, cfg.data_seed + 1)
            if cfg.synthetic_test_count > 0
            else None
        )
    return train, test, train.mean(axis=0)


def _build_single_vae(cfg: ExperimentConfig, pixel_dim: int, rng) -> BernoulliVAE:
    latent = cfg.latent_dims[0]
    hidden = list(cfg.hidden)
    encoder = DenseNetwork.create([pixel_dim, *hidden, latent], rng, slope=cfg.leaky_slope)
    decoder = DenseNetwork.create(
        [latent, *reversed(hidden), pixel_dim], rng, slope=cfg.leaky_slope
    )
    return BernoulliVAE(encoder, decoder, np.zeros(latent))


def _build_hierarchical_vae(cfg: ExperimentConfig, pixel_dim: int, rng) -> HierarchicalVAE:
    hidden = list(cfg.hidden)
    input_dims = [pixel_dim, *cfg.latent_dims[:-1]]
    encoders, decoders = [], []
    for below, latent in zip(input_dims, cfg.latent_dims):
        encoders.append(DenseNetwork.create([below, *hidden, latent], rng, slope=cfg.leaky_slope))
        decoders.append(
            DenseNetwork.create([latent, *reversed(hidden), below], rng, slope=cfg.leaky_slope)
        )
    return HierarchicalVAE(encoders, decoders, np.zeros(cfg.latent_dims[-1]))


def _net_entries(prefix: str, net: DenseNetwork):
    entries = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        entries.append((f"{prefix}/{i}/weight", w))
        entries.append((f"{prefix}/{i}/bias", b))
    return entries


def _model_entries(model):
    entries = []
    if isinstance(model, BernoulliVAE):
        entries += _net_entries("encoder", model.encoder)
        entries += _net_entries("decoder", model.decoder)
    else:
        for t, enc in enumerate(model.encoders):
            entries += _net_entries(f"encoder_{t}", enc)
        for t, dec in enumerate(model.decoders):
            entries += _net_entries(f"decoder_{t}", dec)
    entries.append(("prior", model.prior_logits))
    return entries


def _assign_net(prefix: str, net: DenseNetwork, table: dict) -> None:
    params = []
    for i in range(net.num_layers):
        for leaf in ("weight", "bias"):
            key = f"{prefix}/{i}/{leaf}"
            if key not in table:
                raise CheckpointError(f"checkpoint is missing entry {key!r}")
            params.append(table[key])
    net.assign_params(params)


def _restore_model(model, entries) -> None:
    table = dict(entries)
    if isinstance(model, BernoulliVAE):
        _assign_net("encoder", model.encoder, table)
        _assign_net("decoder", model.decoder, table)
    else:
        for t, enc in enumerate(model.encoders):
            _assign_net(f"encoder_{t}", enc, table)
        for t, dec in enumerate(model.decoders):
            _assign_net(f"decoder_{t}", dec, table)
    if "prior" not in table:
        raise CheckpointError("checkpoint is missing entry 'prior'")
    model.prior_logits = as_logits(table["prior"])


# ---------------------------------------------------------------------------
# Drivers.


def _run_toy(cfg: ExperimentConfig, out: Path, metrics: MetricsWriter, timing: MetricsWriter):
    rng = make_rng(cfg.seed)
    tracker = VarianceTracker(cfg.tracker_decay)
    phi = float(cfg.phi_init)
    objective = lambda bits: toy_value(cfg.p0, bits[0])  # noqa: E731
    baseline = toy_expected_value(cfg.p0, phi)
    started = time.monotonic()
    for step in range(1, cfg.steps + 1):
        est = single_estimate(
            cfg.estimator, np.array([phi]), objective, rng, baseline=baseline, beta=cfg.beta
        )
        phi += cfg.sgd_lr * float(est.partials[0])
        tracker.update("phi", est.partials)
        # sample-independent baseline: exact expected payoff at the new logit
        baseline = toy_expected_value(cfg.p0, phi)
        if step % cfg.log_interval == 0 or step == cfg.steps:
            metrics.write(
                {
                    "step": step,
                    "objective": toy_expected_value(cfg.p0, phi),
                    "sigma_phi": float(sigmoid(phi)),
                    "grad_var": {"phi": tracker.mean_variance("phi")},
                    "estimator_id": cfg.estimator,
                    "seed": cfg.seed,
                }
            )
            timing.write({"step": step, "wall_ms": (time.monotonic() - started) * 1000.0})
    return {
        "kind": cfg.kind,
        "estimator_id": cfg.estimator,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "p0": cfg.p0,
        "final_phi": phi,
        "final_sigma": float(sigmoid(phi)),
        "final_objective": toy_expected_value(cfg.p0, phi),
    }


def _evaluate_held_out(model, held_out, pixel_mean, cfg: ExperimentConfig, eval_rng) -> float:
    subset = held_out[: cfg.eval_subset]
    x_bin = binarize(subset, eval_rng)
    x_enc = center(subset, pixel_mean)
    return evaluate_multisample_bound(model, x_bin, x_enc, cfg.eval_samples, eval_rng)


def _run_vae(cfg: ExperimentConfig, out: Path, metrics: MetricsWriter, timing: MetricsWriter):
    train, test, pixel_mean = _load_dataset(cfg)
    held_out = test if test is not None else train
    root = make_rng(cfg.seed)
    data_rng, model_rng, train_rng, eval_rng = split_rng(root, 4)
    hierarchical = cfg.kind == "vae_hierarchical"
    if hierarchical:
        model = _build_hierarchical_vae(cfg, train.shape[1], model_rng)
        state = HierarchicalTrainState.create(model.num_layers, cfg.adam_lr, cfg.sgd_lr)
    else:
        model = _build_single_vae(cfg, train.shape[1], model_rng)
        state = VaeTrainState.create(cfg.adam_lr, cfg.sgd_lr)
    tracker = VarianceTracker(cfg.tracker_decay)
    smoothed = None
    started = time.monotonic()
    for step in range(1, cfg.steps + 1):
        idx = data_rng.integers(0, train.shape[0], size=cfg.batch_size)
        batch = train[idx]
        x_bin = binarize(batch, data_rng)
        x_enc = center(batch, pixel_mean)
        try:
            if hierarchical:
                res = hierarchical_disarm_step(
                    model, x_bin, x_enc, state, train_rng, coefficient=cfg.estimator
                )
            elif cfg.kind == "vae_multisample":
                res = multisample_step(
                    model, x_bin, x_enc, cfg.pair_count, cfg.estimator, state, train_rng
                )
            else:
                res = elbo_step(model, x_bin, x_enc, cfg.estimator, state, train_rng, beta=cfg.beta)
        except TrainingDiverged:
            save_checkpoint(out / "diverged.ckpt", _model_entries(model))
            raise
        for group, vec in res.grad_groups().items():
            tracker.update(group, vec)
        smoothed = (
            res.objective
            if smoothed is None
            else cfg.smooth_decay * smoothed + (1.0 - cfg.smooth_decay) * res.objective
        )
        eval_due = cfg.eval_interval > 0 and step % cfg.eval_interval == 0
        if step % cfg.log_interval == 0 or step == cfg.steps or eval_due:
            record = {
                "step": step,
                "objective": res.objective,
                "objective_smoothed": smoothed,
                "grad_var": {g: tracker.mean_variance(g) for g in tracker.groups()},
                "estimator_id": cfg.estimator,
                "seed": cfg.seed,
            }
            if eval_due:
                record["test_bound"] = _evaluate_held_out(model, held_out, pixel_mean, cfg, eval_rng)
            metrics.write(record)
            timing.write({"step": step, "wall_ms": (time.monotonic() - started) * 1000.0})
        if cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0:
            save_checkpoint(out / f"step{step:08d}.ckpt", _model_entries(model))
    save_checkpoint(out / "final.ckpt", _model_entries(model))
    return {
        "kind": cfg.kind,
        "estimator_id": cfg.estimator,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "final_objective": res.objective,
        "final_objective_smoothed": smoothed,
        "checkpoint": str(out / "final.ckpt"),
    }


def _run_probe(cfg: ExperimentConfig, out: Path, metrics: MetricsWriter, timing: MetricsWriter):
    if cfg.base_kind == "toy":
        return _run_probe_toy(cfg, out, metrics, timing)
    return _run_probe_vae(cfg, out, metrics, timing)


def _probe_reuses_driver(cfg: ExperimentConfig, probe_id: str) -> bool:
    # Probing the driver at one sample per step is the driver's own series.
    return probe_id == cfg.estimator and cfg.probe_samples == 1 and cfg.probe_interval == 1


def _run_probe_toy(cfg: ExperimentConfig, out: Path, metrics: MetricsWriter, timing: MetricsWriter):
    rng = make_rng(cfg.seed)
    driver_rng, probe_rng = split_rng(rng, 2)
    trackers = {pid: VarianceTracker(cfg.tracker_decay) for pid in cfg.probe_estimators}
    driver_tracker = VarianceTracker(cfg.tracker_decay)
    phi = float(cfg.phi_init)
    objective = lambda bits: toy_value(cfg.p0, bits[0])  # noqa: E731
    started = time.monotonic()
    for step in range(1, cfg.steps + 1):
        baseline = toy_expected_value(cfg.p0, phi)
        est = single_estimate(
            cfg.estimator, np.array([phi]), objective, driver_rng, baseline=baseline, beta=cfg.beta
        )
        driver_tracker.update("phi", est.partials)
        for pid in cfg.probe_estimators:
            if _probe_reuses_driver(cfg, pid):
                trackers[pid].update("phi", est.partials)
        if step % cfg.probe_interval == 0:
            fresh = [pid for pid in cfg.probe_estimators if not _probe_reuses_driver(cfg, pid)]
            if fresh:
                logits = np.array([phi])
                seeds = [int(probe_rng.integers(0, 2**63)) for _ in range(cfg.probe_samples)]

                def one_sample(seed):
                    # one shared seed per draw: arm and disarm see identical pairs
                    return {
                        pid: single_estimate(
                            pid, logits, objective, make_rng(seed), baseline=baseline, beta=cfg.beta
                        ).partials
                        for pid in fresh
                    }

                for sample in _parallel_map(one_sample, seeds):
                    for pid in fresh:
                        trackers[pid].update("phi", sample[pid])
            metrics.write(
                {
                    "step": step,
                    "objective": toy_expected_value(cfg.p0, phi),
                    "sigma_phi": float(sigmoid(phi)),
                    "grad_var": {"phi": driver_tracker.mean_variance("phi")},
                    "probe_var": {
                        pid: trackers[pid].mean_variance("phi") for pid in cfg.probe_estimators
                    },
                    "estimator_id": cfg.estimator,
                    "seed": cfg.seed,
                }
            )
            timing.write({"step": step, "wall_ms": (time.monotonic() - started) * 1000.0})
        phi += cfg.sgd_lr * float(est.partials[0])
    return {
        "kind": cfg.kind,
        "base_kind": cfg.base_kind,
        "estimator_id": cfg.estimator,
        "probe_estimators": list(cfg.probe_estimators),
        "seed": cfg.seed,
        "steps": cfg.steps,
        "final_sigma": float(sigmoid(phi)),
        "probe_var": {pid: trackers[pid].mean_variance("phi") for pid in cfg.probe_estimators},
    }


def _run_probe_vae(cfg: ExperimentConfig, out: Path, metrics: MetricsWriter, timing: MetricsWriter):
    train, test, pixel_mean = _load_dataset(cfg)
    root = make_rng(cfg.seed)
    data_rng, model_rng, train_rng, _eval_rng, probe_rng = split_rng(root, 5)
    model = _build_single_vae(cfg, train.shape[1], model_rng)
    state = VaeTrainState.create(cfg.adam_lr, cfg.sgd_lr)
    trackers = {pid: VarianceTracker(cfg.tracker_decay) for pid in cfg.probe_estimators}
    driver_tracker = VarianceTracker(cfg.tracker_decay)
    probe_batch = cfg.probe_batch_size if cfg.probe_batch_size > 0 else cfg.batch_size
    started = time.monotonic()
    for step in range(1, cfg.steps + 1):
        idx = data_rng.integers(0, train.shape[0], size=cfg.batch_size)
        batch = train[idx]
        x_bin = binarize(batch, data_rng)
        x_enc = center(batch, pixel_mean)
        res = elbo_step(model, x_bin, x_enc, cfg.estimator, state, train_rng, beta=cfg.beta)
        driver_tracker.update("encoder", res.grad_groups()["encoder"])
        for pid in cfg.probe_estimators:
            if _probe_reuses_driver(cfg, pid):
                trackers[pid].update("encoder", flatten_gradients(res.encoder_grads))
        if step % cfg.probe_interval == 0:
            fresh = [pid for pid in cfg.probe_estimators if not _probe_reuses_driver(cfg, pid)]
            if fresh:
                draws = []
                for _ in range(cfg.probe_samples):
                    pidx = probe_rng.integers(0, train.shape[0], size=probe_batch)
                    pbatch = train[pidx]
                    pbin = binarize(pbatch, probe_rng)
                    penc = center(pbatch, pixel_mean)
                    draws.append((pbin, penc, int(probe_rng.integers(0, 2**63))))

                def one_draw(item):
                    pbin, penc, seed = item
                    # same seed across probe ids: pair estimators share samples
                    return {
                        pid: flatten_gradients(
                            compute_elbo_gradients(
                                model,
                                pbin,
                                penc,
                                pid,
                                make_rng(seed),
                                baseline=state.baseline,
                                beta=cfg.beta,
                            ).encoder_grads
                        )
                        for pid in fresh
                    }

                for sample in _parallel_map(one_draw, draws):
                    for pid in fresh:
                        trackers[pid].update("encoder", sample[pid])
            metrics.write(
                {
                    "step": step,
                    "objective": res.objective,
                    "grad_var": {"encoder": driver_tracker.mean_variance("encoder")},
                    "probe_var": {
                        pid: trackers[pid].mean_variance("encoder")
                        for pid in cfg.probe_estimators
                    },
                    "estimator_id": cfg.estimator,
                    "seed": cfg.seed,
                }
            )
            timing.write({"step": step, "wall_ms": (time.monotonic() - started) * 1000.0})
    save_checkpoint(out / "final.ckpt", _model_entries(model))
    return {
        "kind": cfg.kind,
        "base_kind": cfg.base_kind,
        "estimator_id": cfg.estimator,
        "probe_estimators": list(cfg.probe_estimators),
        "seed": cfg.seed,
        "steps": cfg.steps,
        "probe_var": {
            pid: trackers[pid].mean_variance("encoder") for pid in cfg.probe_estimators
        },
    }


# ---------------------------------------------------------------------------
# Entry points.


def run(cfg: ExperimentConfig) -> RunArtifacts:
    """Execute one experiment; artifacts land in cfg.out_dir."""
    cfg.validate()
    if cfg.out_dir is None:
        raise ConfigError("out_dir is required to run an experiment")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timing.jsonl"
    summary_path = out / "summary.json"
    started = time.monotonic()
    with MetricsWriter(metrics_path) as metrics, MetricsWriter(timing_path) as timing:
        try:
            if cfg.kind == "toy":
                summary = _run_toy(cfg, out, metrics, timing)
            elif cfg.kind in ("vae_elbo", "vae_hierarchical", "vae_multisample"):
                summary = _run_vae(cfg, out, metrics, timing)
            elif cfg.kind == "variance_probe":
                summary = _run_probe(cfg, out, metrics, timing)
            else:
                raise ConfigError(f"unknown kind {cfg.kind!r}")
        except Exception as exc:
            summary_path.write_text(
                json.dumps({"status": "error", "error": f"{type(exc).__name__}: {exc}"}, indent=2)
                + "\n",
                encoding="utf-8",
            )
            raise
    summary["status"] = "ok"
    summary["wall_ms_total"] = (time.monotonic() - started) * 1000.0
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return RunArtifacts(
        out_dir=out,
        metrics_path=metrics_path,
        timing_path=timing_path,
        summary_path=summary_path,
        summary=summary,
    )


def evaluate_checkpoint(
    cfg: ExperimentConfig, checkpoint_path, *, samples: int, subset: int, seed: int
) -> dict:
    """Multi-sample bound of a saved model on the held-out set."""
    cfg.validate()
    if cfg.kind == "toy" or (cfg.kind == "variance_probe" and cfg.base_kind == "toy"):
        raise ConfigError("bound evaluation needs a VAE config, not a toy one")
    train, test, pixel_mean = _load_dataset(cfg)
    held_out = test if test is not None else train
    model_rng = make_rng(0)
    if cfg.kind == "vae_hierarchical":
        model = _build_hierarchical_vae(cfg, train.shape[1], model_rng)
    else:
        model = _build_single_vae(cfg, train.shape[1], model_rng)
    _restore_model(model, load_checkpoint(checkpoint_path))
    rng = make_rng(seed)
    chosen = held_out[:subset]
    x_bin = binarize(chosen, rng)
    x_enc = center(chosen, pixel_mean)
    bound = evaluate_multisample_bound(model, x_bin, x_enc, samples, rng)
    return {
        "checkpoint": str(checkpoint_path),
        "bound": bound,
        "samples": samples,
        "data_count": int(chosen.shape[0]),
        "seed": seed,
    }
