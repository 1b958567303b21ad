"""Experiment configuration.

A config is a flat, strictly-schema'd declarative document (JSON on disk).
Field defaults follow the reference training settings: Adam 1e-4 for the
networks, SGD 1e-2 for prior logits, mini-batches of 50, leaky-ReLU slope
0.3, gradient-moment decay 0.999. CLI flags override file/preset values,
and the effective config is echoed into the output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "load_config_file", "build_config"]

KINDS = ("toy", "vae_elbo", "vae_hierarchical", "vae_multisample", "variance_probe")
PROBE_BASE_KINDS = ("toy", "vae_elbo")
SINGLE_ESTIMATORS = ("reinforce", "reinforce_loo", "arm", "disarm", "interpolated")
HIERARCHICAL_ESTIMATORS = ("disarm", "arm")
MULTISAMPLE_ESTIMATORS = ("disarm", "vimco")


class ConfigError(ValueError):
    """The configuration violates the schema or references missing inputs."""


@dataclass
class ExperimentConfig:
    kind: str
    seed: int | None = None
    steps: int = 1000
    estimator: str = "disarm"
    out_dir: str | None = None

    # toy problem
    p0: float = 0.49
    phi_init: float = 0.0

    # interpolated estimator
    beta: float = 0.5

    # model
    latent_dims: tuple = (200,)
    hidden: tuple = ()
    leaky_slope: float = 0.3

    # optimization
    batch_size: int = 50
    adam_lr: float = 1e-4
    sgd_lr: float = 1e-2
    pair_count: int = 1

    # data: either IDX paths or a synthetic blob set
    train_images: str | None = None
    test_images: str | None = None
    synthetic_count: int = 0
    synthetic_test_count: int = 0
    synthetic_side: int = 16
    data_seed: int = 2024

    # logging, evaluation, checkpoints
    log_interval: int = 100
    smooth_decay: float = 0.99
    checkpoint_interval: int = 0
    eval_interval: int = 0
    eval_samples: int = 100
    eval_subset: int = 64
    tracker_decay: float = 0.999

    # variance probe
    base_kind: str | None = None
    probe_estimators: tuple = ()
    probe_interval: int = 1
    probe_samples: int = 1
    probe_batch_size: int = 0

    def validate(self, check_paths: bool = True) -> None:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"unknown kind {self.kind!r}")
        if self.seed is None:
            problems.append("seed is mandatory")
        if self.steps < 1:
            problems.append("steps must be positive")
        if not (0.0 <= self.beta <= 1.0):
            problems.append("beta must lie in [0, 1]")
        if self.kind == "toy" or self.base_kind == "toy":
            if not (0.0 < self.p0 < 1.0):
                problems.append("p0 must lie strictly inside (0, 1)")
        if self.batch_size < 1:
            problems.append("batch_size must be positive")
        if self.pair_count < 1:
            problems.append("pair_count must be positive")
        if not (0.0 < self.tracker_decay < 1.0):
            problems.append("tracker_decay must lie strictly inside (0, 1)")
        if self.kind in ("toy", "vae_elbo") and self.estimator not in SINGLE_ESTIMATORS:
            problems.append(f"estimator must be one of {SINGLE_ESTIMATORS} for {self.kind}")
        if self.kind == "vae_hierarchical" and self.estimator not in HIERARCHICAL_ESTIMATORS:
            problems.append(f"estimator must be one of {HIERARCHICAL_ESTIMATORS} for {self.kind}")
        if self.kind == "vae_multisample" and self.estimator not in MULTISAMPLE_ESTIMATORS:
            problems.append(f"estimator must be one of {MULTISAMPLE_ESTIMATORS} for {self.kind}")
        if self.kind == "variance_probe":
            if self.base_kind not in PROBE_BASE_KINDS:
                problems.append(f"variance_probe needs base_kind in {PROBE_BASE_KINDS}")
            if not self.probe_estimators:
                problems.append("variance_probe needs at least one probe estimator")
            bad = [p for p in self.probe_estimators if p not in SINGLE_ESTIMATORS]
            if bad or self.estimator not in SINGLE_ESTIMATORS:
                problems.append(f"probe estimators must come from {SINGLE_ESTIMATORS}")
            if self.probe_interval < 1 or self.probe_samples < 1:
                problems.append("probe_interval and probe_samples must be positive")
        if self.kind in ("vae_elbo", "vae_hierarchical", "vae_multisample") or (
            self.kind == "variance_probe" and self.base_kind == "vae_elbo"
        ):
            has_files = self.train_images is not None
            has_synthetic = self.synthetic_count > 0
            if not (has_files or has_synthetic):
                problems.append("VAE experiments need train_images or a synthetic_count")
            if not self.latent_dims:
                problems.append("latent_dims must not be empty")
            if check_paths and self.train_images is not None:
                if not Path(self.train_images).exists():
                    problems.append(f"train_images path does not exist: {self.train_images}")
                if self.test_images is not None and not Path(self.test_images).exists():
                    problems.append(f"test_images path does not exist: {self.test_images}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["latent_dims"] = list(self.latent_dims)
        out["hidden"] = list(self.hidden)
        out["probe_estimators"] = list(self.probe_estimators)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in raw:
            raise ConfigError("config needs a kind")
        cleaned = dict(raw)
        for key in ("latent_dims", "hidden", "probe_estimators"):
            if key in cleaned and cleaned[key] is not None:
                cleaned[key] = tuple(cleaned[key])
        return cls(**cleaned)


def _toy_preset(p0: float) -> dict:
    return {
        "kind": "toy",
        "seed": 0,
        "steps": 5000,
        "estimator": "disarm",
        "p0": p0,
        "phi_init": 0.0,
        "sgd_lr": 0.1,
        "batch_size": 1,
        "log_interval": 100,
        "probe_estimators": ["disarm", "arm", "reinforce_loo"],
    }


PRESETS: dict[str, dict] = {
    "toy-0.49": _toy_preset(0.49),
    "toy-0.499": _toy_preset(0.499),
    "toy-0.4999": _toy_preset(0.4999),
    "vae-tiny": {
        "kind": "vae_elbo",
        "seed": 0,
        "steps": 20000,
        "estimator": "disarm",
        "latent_dims": [20],
        "hidden": [],
        "batch_size": 50,
        # desk-scale rate: keeps the full 20k-step run on the improving slope
        "adam_lr": 5e-5,
        "sgd_lr": 1e-2,
        "smooth_decay": 0.999,
        "synthetic_count": 256,
        "synthetic_test_count": 64,
        "synthetic_side": 16,
        "data_seed": 2024,
        "log_interval": 100,
        "probe_estimators": ["disarm", "arm"],
        "probe_interval": 200,
        "probe_samples": 32,
        "probe_batch_size": 25,
    },
    "vae-paper-linear": {
        # Full-scale reference settings; expects locally available IDX files.
        "kind": "vae_elbo",
        "seed": 0,
        "steps": 1_000_000,
        "estimator": "disarm",
        "latent_dims": [200],
        "hidden": [],
        "batch_size": 50,
        "adam_lr": 1e-4,
        "sgd_lr": 1e-2,
        "train_images": "data/train-images-idx3-ubyte",
        "test_images": "data/t10k-images-idx3-ubyte",
        "log_interval": 1000,
        "eval_interval": 10000,
        "eval_samples": 100,
        "eval_subset": 256,
        "checkpoint_interval": 100000,
    },
}


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a single JSON object")
    return raw


def build_config(
    preset: str | None = None,
    config_file=None,
    overrides: dict | None = None,
    check_paths: bool = True,
) -> ExperimentConfig:
    """Merge preset <- file <- overrides, validate, return the effective config."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    if config_file is not None:
        merged.update(load_config_file(config_file))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    cfg = ExperimentConfig.from_dict(merged)
    cfg.validate(check_paths=check_paths)
    return cfg
