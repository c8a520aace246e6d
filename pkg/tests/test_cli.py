"""Command-line interface: subcommands, exit codes, idempotency."""

import csv
import json
from pathlib import Path

import pytest

from mola.cli import main
from mola.errors import AcceptanceError

TINY = {
    "seed": 3,
    "noise_seed": 7,
    "world": {"resolution": 16, "episode_len": 20, "n_objects": 3, "n_goals": 2},
    "data": {"episodes": 8},
    "video": {
        "dim": 32,
        "depth": 1,
        "heads": 2,
        "autoencoder_channels": 8,
        "horizon": 4,
        "autoencoder_steps": 4,
        "denoiser_steps": 4,
        "batch": 4,
    },
    "idm": {
        "dim": 16,
        "encoder_depth": 1,
        "transition_depth": 1,
        "decoder_depth": 1,
        "feature_depth": 1,
        "heads": 2,
        "patch": 8,
        "queries": 2,
        "codes": 8,
        "code_dim": 4,
        "steps": 3,
        "batch": 4,
        "warmup": 1,
        "step_gap": 2,
    },
    "policy": {
        "dim": 32,
        "heads": 2,
        "encoder_depth": 1,
        "decoder_depth": 1,
        "chunk": 4,
        "steps": 3,
        "batch": 4,
        "sample_steps": 2,
        "ar_bins": 8,
    },
    "eval": {"chains": 2, "chain_length": 3, "budget": 8},
}


@pytest.fixture(scope="module")
def cli_stack(tmp_path_factory):
    """Chain gen-data/train-video/train-idm/train-policy through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = str(cfg)
    assert main(["gen-data", "--config", c, "--out", str(root / "data")]) == 0
    assert main(["train-video", "--config", c, "--data", str(root / "data"), "--out", str(root / "video")]) == 0
    assert (
        main(
            [
                "train-idm", "--config", c, "--data", str(root / "data"),
                "--video", str(root / "video" / "video.ckpt"), "--out", str(root / "idm"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train-policy", "--config", c, "--data", str(root / "data"),
                "--video", str(root / "video" / "video.ckpt"),
                "--idms", str(root / "idm"), "--out", str(root / "policy"),
            ]
        )
        == 0
    )
    return {
        "root": root,
        "cfg": c,
        "data": str(root / "data"),
        "video": str(root / "video" / "video.ckpt"),
        "idms": str(root / "idm"),
        "policy": str(root / "policy" / "policy.ckpt"),
    }


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_subcommand_help_lists_flags(self, capsys):
        assert main(["ablate", "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--deterministic", "--plot"):
            assert flag in out

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["train-video", "--out", "x"]) == 1

    def test_runtime_failure_exits_two(self, capsys, tmp_path):
        rc = main(["eval", "--policy", str(tmp_path / "no.ckpt"), "--video", str(tmp_path / "no2.ckpt")])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_acceptance_failure_exits_three(self, cli_stack, tmp_path, monkeypatch, capsys):
        import mola.cli as cli

        def sad(*a, **k):
            raise AcceptanceError("ordering violated")

        monkeypatch.setattr(cli, "ablation_modalities", sad)
        rc = main(
            [
                "ablate", "modalities", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
                "--video", cli_stack["video"], "--idms", cli_stack["idms"], "--out", str(tmp_path),
            ]
        )
        assert rc == 3
        assert "acceptance" in capsys.readouterr().err


class TestGenData:
    def test_twice_is_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"world": TINY["world"]}))
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-data", "--config", str(cfg), "--episodes", "6", "--seed", "0", "--out", str(out)]) == 0
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_same_out_skips_regeneration(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"world": TINY["world"]}))
        out = tmp_path / "d"
        main(["gen-data", "--config", str(cfg), "--episodes", "6", "--seed", "0", "--out", str(out)])
        capsys.readouterr()
        main(["gen-data", "--config", str(cfg), "--episodes", "6", "--seed", "0", "--out", str(out)])
        assert "up to date" in capsys.readouterr().out


class TestTrainingReuse:
    def test_video_retrain_is_skipped(self, cli_stack, capsys):
        rc = main(
            ["train-video", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--out", str(cli_stack["root"] / "video")]
        )
        assert rc == 0
        assert "up to date" in capsys.readouterr().out

    def test_idm_retrain_is_skipped(self, cli_stack, capsys):
        rc = main(
            ["train-idm", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--video", cli_stack["video"], "--out", str(cli_stack["root"] / "idm")]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("up to date") == 5

    def test_policy_retrain_is_skipped(self, cli_stack, capsys):
        rc = main(
            ["train-policy", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--video", cli_stack["video"], "--idms", cli_stack["idms"],
             "--out", str(cli_stack["root"] / "policy")]
        )
        assert rc == 0
        assert "up to date" in capsys.readouterr().out


class TestEvalCommand:
    def test_prints_metrics_and_writes_json(self, cli_stack, tmp_path, capsys):
        rc = main(
            ["eval", "--policy", cli_stack["policy"], "--video", cli_stack["video"],
             "--chains", "2", "--chain-length", "3", "--budget", "6", "--out", str(tmp_path)]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "success=" in out and "avg_len=" in out
        payload = json.loads((tmp_path / "eval.json").read_text())
        assert payload["n_chains"] == 2 and len(payload["rates"]) == 3

    def test_control_mode_flag(self, cli_stack, capsys):
        rc = main(
            ["eval", "--policy", cli_stack["policy"], "--video", cli_stack["video"],
             "--mode", "same_frame", "--chains", "1", "--chain-length", "3", "--budget", "4"]
        )
        assert rc == 0


class TestAblateCommand:
    def test_controls_with_plot(self, cli_stack, tmp_path, capsys):
        rc = main(
            ["ablate", "controls", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--video", cli_stack["video"], "--idms", cli_stack["idms"],
             "--out", str(tmp_path), "--seeds", "1", "--plot"]
        )
        assert rc == 0
        rows = list(csv.DictReader((tmp_path / "tables" / "controls.csv").open()))
        assert [r["variant"] for r in rows] == ["full", "same_frame", "noisy_frame"]
        assert (tmp_path / "plots" / "controls.png").stat().st_size > 0

    def test_explicit_idm_flag_overrides_directory(self, cli_stack, tmp_path, capsys):
        flow = str(Path(cli_stack["idms"]) / "idm-flow" / "idm-flow.ckpt")
        rc = main(
            ["probe", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--idms", cli_stack["idms"], "--idm", f"flow={flow}",
             "--samples", "120", "--probe-seeds", "0"]
        )
        assert rc == 0

    def test_bad_idm_spec_is_runtime_error(self, cli_stack, capsys):
        rc = main(
            ["probe", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--idm", "nonsense", "--samples", "120"]
        )
        assert rc == 2


class TestProbeAndPlot:
    def test_probe_writes_csv_and_summary(self, cli_stack, tmp_path, capsys):
        out = tmp_path / "probe.csv"
        rc = main(
            ["probe", "--config", cli_stack["cfg"], "--data", cli_stack["data"],
             "--idms", cli_stack["idms"], "--samples", "150", "--probe-seeds", "0,1",
             "--out", str(out)]
        )
        assert rc == 0
        text = capsys.readouterr().out
        for feature in ("mixture", "pixel_diff", "oracle", "constant"):
            assert feature in text
        assert len(list(csv.DictReader(out.open()))) == 8

    def test_plot_from_csv(self, cli_stack, tmp_path, capsys):
        csv_path = tmp_path / "t.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, ["variant", "n_seeds", "success_mean", "success_std", "avg_len_mean", "avg_len_std"])
            w.writeheader()
            w.writerow({"variant": "a", "n_seeds": 1, "success_mean": 0.5, "success_std": 0.1,
                        "avg_len_mean": 1.0, "avg_len_std": 0.2})
        rc = main(["plot", "--kind", "head", "--csv", str(csv_path), "--out", str(tmp_path / "p.png")])
        assert rc == 0
        assert (tmp_path / "p.png").stat().st_size > 0


class TestReproduceAll:
    def test_chains_all_stages_and_is_idempotent(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY))
        out = tmp_path / "out"
        argv = ["reproduce-all", "--config", str(cfg), "--out", str(out),
                "--seeds", "1", "--steps-list", "1,2", "--probe-samples", "100"]
        assert main(argv) == 0
        tables = {p.name for p in (out / "tables").glob("*.csv")}
        assert tables == {
            "modalities.csv", "design.csv", "controls.csv", "data-eff.csv",
            "pretrain.csv", "freeze.csv", "denoise-steps.csv", "head.csv", "probe.csv",
        }
        assert len(list((out / "plots").glob("*.png"))) == 8
        first = {p: p.read_bytes() for p in (out / "tables").glob("*.csv")}
        capsys.readouterr()
        assert main(argv) == 0  # second run reuses everything
        assert "reproduce-all complete" in capsys.readouterr().out
        for p, blob in first.items():
            if p.name == "denoise-steps.csv":  # wall-clock column is measured, not derived
                strip = lambda raw: [
                    {k: v for k, v in row.items() if k != "wall_clock_s"}
                    for row in csv.DictReader(raw.decode().splitlines())
                ]
                assert strip(p.read_bytes()) == strip(blob)
            else:
                assert p.read_bytes() == blob, p.name
