"""Command line front end.

Subcommands: toy, train, probe, eval, inspect-checkpoint. Configuration
comes from a shipped preset and/or a JSON config file, with flags winning
over both. The effective config is echoed into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import PRESETS, ConfigError, build_config
from .data import IdxFormatError
from .experiments import evaluate_checkpoint, run
from .nn import CheckpointError, checkpoint_summary
from .vae import TrainingDiverged

__all__ = ["main", "build_parser"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named built-in configuration")
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--seed", type=int, help="experiment seed (u64)")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--estimator", help="gradient estimator id")
    parser.add_argument("--steps", type=int, help="number of training steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disarm",
        description="Gradient estimation experiments for binary latent variable models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="train the single-bit toy problem")
    _add_common(toy)
    toy.add_argument("--p0", type=float, help="toy payoff target")

    train = sub.add_parser("train", help="train a Bernoulli VAE")
    _add_common(train)
    train.add_argument("--pairs", type=int, help="antithetic pair count K (multi-sample)")

    probe = sub.add_parser("probe", help="train with one estimator, probe others' variance")
    _add_common(probe)
    probe.add_argument(
        "--probe-estimators", help="comma-separated estimator ids to probe along the run"
    )
    probe.add_argument("--probe-interval", type=int, help="steps between probe measurements")
    probe.add_argument("--probe-samples", type=int, help="gradient draws per probe measurement")

    ev = sub.add_parser("eval", help="evaluate the multi-sample bound of a checkpoint")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True, help="path to a saved checkpoint")
    ev.add_argument("--samples", type=int, default=100, help="samples per datum in the bound")
    ev.add_argument("--subset", type=int, default=64, help="held-out data count to evaluate")

    inspect = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    inspect.add_argument("checkpoint", help="path to a saved checkpoint")
    return parser


def _overrides_from(args: argparse.Namespace) -> dict:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "estimator": getattr(args, "estimator", None),
        "steps": getattr(args, "steps", None),
    }
    if getattr(args, "p0", None) is not None:
        overrides["p0"] = args.p0
    if getattr(args, "pairs", None) is not None:
        overrides["pair_count"] = args.pairs
    if getattr(args, "probe_estimators", None) is not None:
        overrides["probe_estimators"] = [
            name.strip() for name in args.probe_estimators.split(",") if name.strip()
        ]
    if getattr(args, "probe_interval", None) is not None:
        overrides["probe_interval"] = args.probe_interval
    if getattr(args, "probe_samples", None) is not None:
        overrides["probe_samples"] = args.probe_samples
    return overrides


def _default_out(cfg_kind: str, preset: str | None, seed) -> str:
    stem = preset if preset is not None else cfg_kind
    return f"runs/{stem}-seed{seed}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            summary = checkpoint_summary(args.checkpoint)
            print(f"version:    {summary['version']}")
            print(f"entries:    {len(summary['entries'])}")
            print(f"parameters: {summary['parameters']}")
            print(f"checksum:   {'ok' if summary['checksum_ok'] else 'MISMATCH'}")
            for name, shape in summary["entries"]:
                print(f"  {name}  {list(shape)}")
            return 0 if summary["checksum_ok"] else 1

        overrides = _overrides_from(args)
        cfg = build_config(preset=args.preset, config_file=args.config, overrides=overrides)

        if args.command == "eval":
            result = evaluate_checkpoint(
                cfg,
                args.checkpoint,
                samples=args.samples,
                subset=args.subset,
                seed=cfg.seed,
            )
            print(json.dumps(result, indent=2))
            return 0

        if args.command == "toy" and cfg.kind != "toy":
            raise ConfigError(f"'toy' expects a toy config, got kind {cfg.kind!r}")
        if args.command == "train" and cfg.kind not in (
            "vae_elbo",
            "vae_hierarchical",
            "vae_multisample",
        ):
            raise ConfigError(f"'train' expects a VAE config, got kind {cfg.kind!r}")
        if args.command == "probe":
            # wrap the base experiment into its variance-probe variant
            if cfg.kind in ("toy", "vae_elbo"):
                cfg.base_kind = cfg.kind
                cfg.kind = "variance_probe"
            elif cfg.kind != "variance_probe":
                raise ConfigError(f"'probe' cannot wrap kind {cfg.kind!r}")
            cfg.validate()
        if cfg.out_dir is None:
            cfg.out_dir = _default_out(cfg.kind, args.preset, cfg.seed)

        artifacts = run(cfg)
        print(json.dumps(artifacts.summary, indent=2))
        return 0
    except (ConfigError, CheckpointError, IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
