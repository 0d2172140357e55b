#!/usr/bin/env python3
"""
Tests for the Command-Line Interface
"""

import json
import os
import sys

import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canet_cli import __version__
from canet_cli.canet import ModelConfig, save_checkpoint
from canet_cli.imaging import read_ppm, write_ppm
from canet_cli.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, CanetCLI
from canet_cli.metrics import psnr
from canet_cli.nn import init_params, zero_parameters

MICRO = ModelConfig(blocks=1, layers=1, channels=8, pa_hidden=(4, 2), ca_reduction=4)


@pytest.fixture
def cli():
    return CanetCLI()


@pytest.fixture
def clean_file(tmp_path, natural_image):
    path = tmp_path / "clean.ppm"
    write_ppm(natural_image, path)
    return path


@pytest.fixture
def micro_config_file(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps({
        "batch_size": 2,
        "patch_size": 16,
        "patches_per_image": 2,
        "eval_every": 1,
        "tile": 16,
        "overlap": 4,
        "model": MICRO.to_dict(),
    }))
    return path


@pytest.fixture
def identity_checkpoint(tmp_path):
    params = init_params(MICRO, seed=0)
    zero_parameters(params, "tail")
    path = tmp_path / "identity.cant"
    save_checkpoint(params, MICRO, path, {"task": {"kind": "awgn", "sigma": 25.0, "quality": 10, "subsample": True}})
    return path


class TestParser:
    """Test cases for argument parsing"""

    def test_help_lists_commands(self, cli, capsys):
        """Test the top-level help"""
        assert cli.run(["--help"]) == EXIT_OK
        out = capsys.readouterr().out
        for command in ("degrade", "train", "restore", "eval", "gradcheck", "params"):
            assert command in out

    def test_train_help_lists_flags(self, cli, capsys):
        """Test the train help shows every flag"""
        assert cli.run(["train", "--help"]) == EXIT_OK
        out = capsys.readouterr().out
        for flag in ("--task", "--sigma", "--quality", "--config", "--seed", "--steps", "--data", "--checkpoint"):
            assert flag in out

    def test_restore_help_lists_tiles(self, cli, capsys):
        """Test the restore help shows tiling flags"""
        cli.run(["restore", "--help"])
        out = capsys.readouterr().out
        assert "--tile" in out and "--overlap" in out

    def test_version(self, cli, capsys):
        """Test --version"""
        assert cli.run(["--version"]) == EXIT_OK
        assert __version__ in capsys.readouterr().out

    def test_no_command(self, cli, capsys):
        """Test running without a command"""
        assert cli.run([]) == EXIT_USAGE

    def test_missing_required(self, cli, capsys):
        """Test a missing required argument"""
        assert cli.run(["degrade", "--out", "x.ppm"]) == EXIT_USAGE
        assert "Erreur" in capsys.readouterr().err

    def test_invalid_choice(self, cli, clean_file, tmp_path, capsys):
        """Test an unknown degradation kind"""
        assert cli.run(["degrade", "--task", "blur", "--in", str(clean_file), "--out", str(tmp_path / "o.ppm")]) == 1


class TestDegrade:
    """Test cases for the degrade command"""

    def test_awgn(self, cli, clean_file, tmp_path, natural_image, capsys):
        """Test noise at sigma=25 is written and reported"""
        out = tmp_path / "noisy.ppm"
        code = cli.run(["--json", "degrade", "--task", "awgn", "--sigma", "25", "--in", str(clean_file),
                        "--out", str(out), "--seed", "7"])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["task"] == "awgn(sigma=25)"
        assert report["psnr"] == pytest.approx(psnr(read_ppm(out), natural_image), abs=1e-3)
        assert 19.0 < report["psnr"] < 22.0

    def test_sigma_without_task(self, cli, clean_file, tmp_path, capsys):
        """Test --sigma alone selects noise"""
        assert cli.run(["degrade", "--sigma", "5", "--in", str(clean_file), "--out", str(tmp_path / "n.ppm")]) == 0
        assert "awgn(sigma=5)" in capsys.readouterr().out

    def test_seeded(self, cli, clean_file, tmp_path):
        """Test the same seed writes identical files"""
        for name in ("a.ppm", "b.ppm"):
            cli.run(["degrade", "--sigma", "30", "--seed", "3", "--in", str(clean_file), "--out", str(tmp_path / name)])
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_jpeg(self, cli, clean_file, tmp_path, capsys):
        """Test JPEG degradation with subsampling disabled"""
        out = tmp_path / "q.ppm"
        code = cli.run(["degrade", "--task", "jpeg", "--quality", "20", "--no-subsample",
                        "--in", str(clean_file), "--out", str(out)])
        assert code == EXIT_OK
        assert "jpeg(quality=20, subsample=off)" in capsys.readouterr().out
        assert read_ppm(out).width == 64

    def test_invalid_quality(self, cli, clean_file, tmp_path, capsys):
        """Test a quality outside [1, 100] is a runtime error"""
        code = cli.run(["degrade", "--task", "jpeg", "--quality", "0", "--in", str(clean_file),
                        "--out", str(tmp_path / "q.ppm")])
        assert code == EXIT_RUNTIME
        assert "Erreur" in capsys.readouterr().err

    def test_missing_input(self, cli, tmp_path, capsys):
        """Test an input file that does not exist"""
        code = cli.run(["--json", "degrade", "--in", str(tmp_path / "none.ppm"), "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_RUNTIME
        assert "error" in json.loads(capsys.readouterr().err)


class TestParams:
    """Test cases for the params command"""

    def test_default(self, cli, capsys):
        """Test the default network size"""
        assert cli.run(["--json", "params"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["params"] == 2730293

    def test_tiny(self, cli, capsys):
        """Test the tiny preset"""
        assert cli.run(["params", "--config", "tiny"]) == EXIT_OK
        assert "params: 29500" in capsys.readouterr().out

    def test_unknown_config(self, cli, capsys):
        """Test a config that is neither a preset nor a file"""
        assert cli.run(["params", "--config", "nothing.json"]) == EXIT_RUNTIME


class TestGradcheck:
    """Test cases for the gradcheck command"""

    def test_micro_config(self, cli, micro_config_file, capsys):
        """Test gradients of a small model pass the threshold"""
        assert cli.run(["--json", "gradcheck", "--config", str(micro_config_file), "--samples", "2"]) == EXIT_OK
        result = json.loads(capsys.readouterr().out)
        assert result["passed"] is True
        assert result["max_relative_error"] < 1e-4

    def test_impossible_threshold(self, cli, micro_config_file, capsys):
        """Test a negative threshold fails the check"""
        code = cli.run(["gradcheck", "--config", str(micro_config_file), "--samples", "1", "--threshold", "-1"])
        assert code == EXIT_RUNTIME


class TestTrainRestoreEval:
    """Test cases for train, restore and eval"""

    def test_train(self, cli, micro_config_file, image_dir, tmp_path, capsys):
        """Test a short training run writes checkpoints"""
        run_dir = tmp_path / "run"
        code = cli.run(["--json", "train", "--config", str(micro_config_file), "--data", str(image_dir),
                        "--steps", "2", "--checkpoint", str(run_dir)])
        assert code == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["steps"] == 2
        assert summary["checkpoint"] == str(run_dir / "best.cant")
        assert (run_dir / "last.cant").is_file()

    def test_train_empty_data(self, cli, micro_config_file, tmp_path):
        """Test training on an empty directory"""
        (tmp_path / "empty").mkdir()
        code = cli.run(["train", "--config", str(micro_config_file), "--data", str(tmp_path / "empty"), "--steps", "1"])
        assert code == EXIT_RUNTIME

    def test_train_ablation(self, cli, micro_config_file, image_factory, tmp_path, capsys):
        """Test the ablation harness prints one row per variant"""
        data = tmp_path / "big"
        data.mkdir()
        write_ppm(image_factory(), data / "img.ppm")
        code = cli.run(["train", "--config", str(micro_config_file), "--data", str(data),
                        "--steps", "1", "--ablation", "components"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        for name in ("element-wise", "+concatenation", "+feature-selection", "+feature-attention"):
            assert name in out

    def test_restore_identity(self, cli, identity_checkpoint, clean_file, tmp_path, natural_image):
        """Test restoring with an identity model reproduces the input"""
        out = tmp_path / "restored.ppm"
        code = cli.run(["restore", "--checkpoint", str(identity_checkpoint), "--in", str(clean_file),
                        "--out", str(out), "--tile", "24", "--overlap", "4", "--workers", "2"])
        assert code == EXIT_OK
        assert read_ppm(out) == natural_image

    def test_restore_missing_checkpoint(self, cli, clean_file, tmp_path, capsys):
        """Test a checkpoint file that does not exist"""
        code = cli.run(["restore", "--checkpoint", str(tmp_path / "none.cant"), "--in", str(clean_file),
                        "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_RUNTIME

    def test_eval_report(self, cli, identity_checkpoint, image_dir, tmp_path, capsys):
        """Test eval prints per-image lines and writes the JSON report"""
        report_path = tmp_path / "report.json"
        code = cli.run(["eval", "--checkpoint", str(identity_checkpoint), "--data", str(image_dir),
                        "--tile", "16", "--overlap", "4", "--report", str(report_path)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "a.ppm: psnr=" in out and "moyenne:" in out
        report = json.loads(report_path.read_text())
        assert report["summary"]["images"] == 2
        assert report["summary"]["psnr"] == report["summary"]["degraded_psnr"]
        assert [row["name"] for row in report["images"]] == ["a.ppm", "b.ppm"]

    def test_eval_task_mismatch(self, cli, identity_checkpoint, image_dir, capsys):
        """Test evaluating a denoising checkpoint on JPEG data"""
        code = cli.run(["eval", "--checkpoint", str(identity_checkpoint), "--data", str(image_dir), "--task", "jpeg"])
        assert code == EXIT_RUNTIME

    def test_eval_unreadable_task_echo(self, cli, image_dir, tmp_path, capsys):
        """Test malformed task metadata exits with a runtime error"""
        path = tmp_path / "bad.cant"
        save_checkpoint(init_params(MICRO, seed=0), MICRO, path, {"task": {"kind": "awgn", "level": 5}})
        assert cli.run(["eval", "--checkpoint", str(path), "--data", str(image_dir)]) == EXIT_RUNTIME
        assert "Erreur" in capsys.readouterr().err
