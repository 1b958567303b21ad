import json
import math
import os

import numpy as np
import pytest

from disarm.cli import main
from disarm.config import ConfigError, ExperimentConfig, build_config
from disarm.data import IDX_IMAGE_MAGIC
from disarm.experiments import (
    THREAD_ENV_VAR,
    evaluate_checkpoint,
    run,
    single_estimate,
    thread_count,
)
from disarm.nn import load_checkpoint
from disarm.rng import make_rng
from disarm.vae import toy_value


def read_records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def toy_config(tmp_path, **kw):
    base = {
        "kind": "toy",
        "seed": 3,
        "steps": 300,
        "estimator": "disarm",
        "p0": 0.49,
        "sgd_lr": 0.1,
        "log_interval": 50,
        "out_dir": str(tmp_path / "out"),
    }
    base.update(kw)
    return ExperimentConfig.from_dict(base)


class TestToyRun:
    def test_artifacts_and_summary(self, tmp_path):
        art = run(toy_config(tmp_path))
        assert art.metrics_path.exists()
        assert art.timing_path.exists()
        assert art.summary_path.exists()
        assert (art.out_dir / "config.json").exists()
        assert art.summary["status"] == "ok"
        assert 0.0 < art.summary["final_sigma"] < 1.0

    def test_metrics_schema_matches_golden(self, tmp_path):
        # 10-step run; schema (keys per record) pinned by the golden file
        art = run(toy_config(tmp_path, steps=10, log_interval=1))
        records = read_records(art.metrics_path)
        assert len(records) == 10
        golden_path = os.path.join(os.path.dirname(__file__), "golden_metrics_schema.json")
        golden = json.loads(open(golden_path, encoding="utf-8").read())
        for record in records:
            assert list(record) == golden["toy"]["keys"]
            assert list(record["grad_var"]) == golden["toy"]["grad_var_groups"]
        timing = read_records(art.timing_path)
        assert all(list(t) == ["step", "wall_ms"] for t in timing)

    def test_ascends_toward_the_better_bit(self, tmp_path):
        # (1 - 2*p0) > 0: ascent pushes sigma(phi) up; generous rate drives it
        # essentially to the optimum within 5000 steps
        cfg = toy_config(tmp_path, steps=5000, sgd_lr=1.0, seed=1)
        art = run(cfg)
        assert art.summary["final_sigma"] > 0.95

    def test_estimator_sweep_smoke(self, tmp_path):
        for est in ("reinforce", "reinforce_loo", "arm", "interpolated"):
            cfg = toy_config(tmp_path / est, steps=120, estimator=est)
            art = run(cfg)
            assert art.summary["status"] == "ok"

    def test_single_estimate_dispatch_rejects_unknown(self):
        with pytest.raises(ConfigError):
            single_estimate("nope", np.zeros(1), lambda b: 0.0, make_rng(0))


class TestDeterminism:
    def test_toy_metrics_byte_identical(self, tmp_path):
        a = run(toy_config(tmp_path / "a"))
        b = run(toy_config(tmp_path / "b"))
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_different_seed_changes_metrics(self, tmp_path):
        a = run(toy_config(tmp_path / "a"))
        b = run(toy_config(tmp_path / "b", seed=4))
        assert a.metrics_path.read_bytes() != b.metrics_path.read_bytes()

    def test_vae_metrics_byte_identical(self, tmp_path):
        overrides = {"steps": 60, "log_interval": 20, "synthetic_count": 32}
        runs = []
        for name in ("a", "b"):
            cfg = build_config(
                preset="vae-tiny",
                overrides=dict(overrides, out_dir=str(tmp_path / name)),
            )
            runs.append(run(cfg))
        assert runs[0].metrics_path.read_bytes() == runs[1].metrics_path.read_bytes()

    def test_checkpoints_byte_identical(self, tmp_path):
        paths = []
        for name in ("a", "b"):
            cfg = build_config(
                preset="vae-tiny",
                overrides={
                    "steps": 25,
                    "synthetic_count": 16,
                    "out_dir": str(tmp_path / name),
                },
            )
            paths.append(run(cfg).out_dir / "final.ckpt")
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestVaeRuns:
    def test_elbo_improves_at_short_horizon(self, tmp_path):
        cfg = build_config(
            preset="vae-tiny",
            overrides={"steps": 1200, "out_dir": str(tmp_path / "run"), "adam_lr": 3e-4},
        )
        art = run(cfg)
        records = read_records(art.metrics_path)
        assert records[-1]["objective_smoothed"] > records[0]["objective_smoothed"]

    def test_eval_bound_recorded(self, tmp_path):
        cfg = build_config(
            preset="vae-tiny",
            overrides={
                "steps": 40,
                "log_interval": 20,
                "eval_interval": 20,
                "eval_subset": 8,
                "eval_samples": 16,
                "synthetic_count": 32,
                "synthetic_test_count": 16,
                "out_dir": str(tmp_path / "run"),
            },
        )
        art = run(cfg)
        records = read_records(art.metrics_path)
        bounds = [r["test_bound"] for r in records if "test_bound" in r]
        assert len(bounds) == 2
        assert all(math.isfinite(b) for b in bounds)

    def test_hierarchical_and_multisample_smoke(self, tmp_path):
        hier = ExperimentConfig.from_dict(
            {
                "kind": "vae_hierarchical",
                "seed": 1,
                "steps": 30,
                "estimator": "disarm",
                "latent_dims": [6, 4],
                "synthetic_count": 16,
                "synthetic_side": 4,
                "batch_size": 8,
                "log_interval": 10,
                "out_dir": str(tmp_path / "hier"),
            }
        )
        art = run(hier)
        assert art.summary["status"] == "ok"
        multi = ExperimentConfig.from_dict(
            {
                "kind": "vae_multisample",
                "seed": 1,
                "steps": 30,
                "estimator": "vimco",
                "pair_count": 2,
                "latent_dims": [6],
                "synthetic_count": 16,
                "synthetic_side": 4,
                "batch_size": 8,
                "log_interval": 10,
                "out_dir": str(tmp_path / "multi"),
            }
        )
        art = run(multi)
        assert art.summary["status"] == "ok"

    def test_idx_dataset_end_to_end(self, tmp_path):
        import struct

        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=24 * 16, dtype=np.uint8)
        blob = struct.pack(">IIII", IDX_IMAGE_MAGIC, 24, 4, 4) + pixels.tobytes()
        idx_path = tmp_path / "train.idx"
        idx_path.write_bytes(blob)
        cfg = ExperimentConfig.from_dict(
            {
                "kind": "vae_elbo",
                "seed": 2,
                "steps": 20,
                "estimator": "disarm",
                "latent_dims": [4],
                "train_images": str(idx_path),
                "batch_size": 6,
                "log_interval": 10,
                "out_dir": str(tmp_path / "run"),
            }
        )
        art = run(cfg)
        assert art.summary["status"] == "ok"

    def test_checkpoint_eval_round_trip(self, tmp_path):
        cfg = build_config(
            preset="vae-tiny",
            overrides={
                "steps": 30,
                "synthetic_count": 32,
                "synthetic_test_count": 16,
                "out_dir": str(tmp_path / "run"),
            },
        )
        art = run(cfg)
        ckpt = art.out_dir / "final.ckpt"
        assert ckpt.exists()
        entries = load_checkpoint(ckpt)
        names = [n for n, _ in entries]
        assert "encoder/0/weight" in names and "prior" in names
        result = evaluate_checkpoint(cfg, ckpt, samples=16, subset=8, seed=5)
        assert math.isfinite(result["bound"])
        # same seed, same bound (dedicated stream)
        again = evaluate_checkpoint(cfg, ckpt, samples=16, subset=8, seed=5)
        assert result["bound"] == again["bound"]


class TestProbeRuns:
    def test_probing_the_driver_tracks_its_own_series(self, tmp_path):
        cfg = ExperimentConfig.from_dict(
            {
                "kind": "variance_probe",
                "base_kind": "toy",
                "seed": 7,
                "steps": 400,
                "estimator": "disarm",
                "probe_estimators": ["disarm"],
                "probe_interval": 1,
                "probe_samples": 1,
                "p0": 0.49,
                "sgd_lr": 0.1,
                "log_interval": 100,
                "out_dir": str(tmp_path / "probe"),
            }
        )
        art = run(cfg)
        records = read_records(art.metrics_path)
        for record in records:
            assert record["probe_var"]["disarm"] == record["grad_var"]["phi"]

    def test_toy_probe_variance_ordering(self, tmp_path):
        # 5000-sample probe batches; the ordering must hold at every logged
        # step once the trackers have data
        cfg = ExperimentConfig.from_dict(
            {
                "kind": "variance_probe",
                "base_kind": "toy",
                "seed": 1,
                "steps": 60,
                "estimator": "disarm",
                "probe_estimators": ["disarm", "arm", "reinforce_loo"],
                "probe_interval": 15,
                "probe_samples": 5000,
                "p0": 0.499,
                "sgd_lr": 0.1,
                "out_dir": str(tmp_path / "probe"),
            }
        )
        art = run(cfg)
        records = read_records(art.metrics_path)
        assert len(records) == 4
        for record in records:
            probe = record["probe_var"]
            assert probe["disarm"] < probe["arm"]
            assert probe["disarm"] < probe["reinforce_loo"]

    def test_constant_payoff_drives_probe_variance_to_zero(self, tmp_path):
        cfg = ExperimentConfig.from_dict(
            {
                "kind": "variance_probe",
                "base_kind": "toy",
                "seed": 2,
                "steps": 40,
                "estimator": "disarm",
                "probe_estimators": ["disarm", "arm"],
                "probe_interval": 10,
                "probe_samples": 200,
                "p0": 0.5,
                "sgd_lr": 0.0,
                "out_dir": str(tmp_path / "probe"),
            }
        )
        # p0 = 0.5 makes both payoffs equal: every estimator sees a constant f
        art = run(cfg)
        records = read_records(art.metrics_path)
        assert records[-1]["probe_var"]["disarm"] == pytest.approx(0.0, abs=1e-18)
        assert records[-1]["probe_var"]["arm"] == pytest.approx(0.0, abs=1e-18)

    def test_thread_count_does_not_change_results(self, tmp_path, monkeypatch):
        def probe_cfg(name):
            return ExperimentConfig.from_dict(
                {
                    "kind": "variance_probe",
                    "base_kind": "toy",
                    "seed": 5,
                    "steps": 30,
                    "estimator": "disarm",
                    "probe_estimators": ["disarm", "arm"],
                    "probe_interval": 10,
                    "probe_samples": 16,
                    "p0": 0.49,
                    "sgd_lr": 0.1,
                    "out_dir": str(tmp_path / name),
                }
            )

        monkeypatch.delenv(THREAD_ENV_VAR, raising=False)
        a = run(probe_cfg("serial"))
        monkeypatch.setenv(THREAD_ENV_VAR, "4")
        assert thread_count() == 4
        b = run(probe_cfg("threaded"))
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_bad_thread_env_rejected(self, monkeypatch):
        monkeypatch.setenv(THREAD_ENV_VAR, "many")
        with pytest.raises(ConfigError):
            thread_count()


class TestCli:
    def test_toy_subcommand(self, tmp_path, capsys):
        code = main(
            ["toy", "--preset", "toy-0.49", "--steps", "40", "--out", str(tmp_path / "t")]
        )
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["status"] == "ok"
        assert (tmp_path / "t" / "metrics.jsonl").exists()

    def test_train_and_inspect_and_eval(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code = main(
            [
                "train",
                "--preset",
                "vae-tiny",
                "--steps",
                "25",
                "--out",
                str(out_dir),
            ]
        )
        assert code == 0
        capsys.readouterr()
        ckpt = out_dir / "final.ckpt"
        code = main(["inspect-checkpoint", str(ckpt)])
        assert code == 0
        text = capsys.readouterr().out
        assert "checksum:   ok" in text
        assert "encoder/0/weight" in text
        code = main(
            [
                "eval",
                "--preset",
                "vae-tiny",
                "--checkpoint",
                str(ckpt),
                "--samples",
                "8",
                "--subset",
                "4",
            ]
        )
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert math.isfinite(result["bound"])

    def test_probe_subcommand_wraps_base_kind(self, tmp_path, capsys):
        code = main(
            [
                "probe",
                "--preset",
                "toy-0.499",
                "--steps",
                "30",
                "--probe-estimators",
                "disarm,arm",
                "--probe-interval",
                "10",
                "--probe-samples",
                "50",
                "--out",
                str(tmp_path / "p"),
            ]
        )
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["kind"] == "variance_probe"
        assert summary["base_kind"] == "toy"

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"kind": "toy", "seed": 9, "steps": 50, "p0": 0.3}))
        code = main(
            ["toy", "--config", str(cfg_path), "--steps", "20", "--out", str(tmp_path / "o")]
        )
        assert code == 0
        echoed = json.loads((tmp_path / "o" / "config.json").read_text())
        assert echoed["steps"] == 20
        assert echoed["p0"] == 0.3
        assert echoed["seed"] == 9

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert main(["toy", "--config", str(tmp_path / "missing.json")]) == 2
        assert "error:" in capsys.readouterr().err
        # kind mismatch between subcommand and config
        assert main(["train", "--preset", "toy-0.49", "--out", str(tmp_path / "x")]) == 2

    def test_missing_seed_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"kind": "toy", "steps": 10}))
        assert main(["toy", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2
        assert "seed" in capsys.readouterr().err


def test_toy_objective_adapter_matches_module_function():
    assert toy_value(0.49, 1.0) == pytest.approx(0.2601)
