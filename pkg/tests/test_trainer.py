#!/usr/bin/env python3
"""
Tests for Training, Evaluation and Experiment Protocols
"""

import json
import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canet_cli import trainer
from canet_cli.canet import ModelConfig, save_checkpoint
from canet_cli.errors import CheckpointError, ConfigError, ContractError, TrainingDivergedError
from canet_cli.imaging import DegradationTask, ImageBuffer, load_image_dir
from canet_cli.nn import AdamConfig, init_params, zero_parameters
from canet_cli.trainer import (
    BEST_CHECKPOINT,
    DIVERGENCE_FILE,
    LAST_CHECKPOINT,
    LOG_FILE,
    BatchLoader,
    TrainConfig,
    TrainLog,
    ablation_variants,
    batch_loss,
    build_patch_pool,
    evaluate,
    iterate_batches,
    load_config,
    overfit_protocol,
    run_ablation,
    train,
    train_step,
)

MICRO = ModelConfig(blocks=1, layers=1, channels=8, pa_hidden=(4, 2), ca_reduction=4)


@pytest.fixture
def micro_cfg():
    return TrainConfig(
        batch_size=2,
        steps=3,
        eval_every=2,
        patch_size=16,
        patches_per_image=2,
        tile=16,
        overlap=4,
        model=MICRO,
    )


@pytest.fixture
def loader(natural_image, micro_cfg):
    return BatchLoader(build_patch_pool([natural_image], micro_cfg), micro_cfg)


@pytest.fixture
def identity_checkpoint(tmp_path, tiny_config):
    params = init_params(tiny_config, seed=0)
    zero_parameters(params, "tail")
    path = tmp_path / "identity.cant"
    save_checkpoint(params, tiny_config, path, {"task": DegradationTask("awgn", sigma=25.0).to_dict()})
    return path


class TestTrainConfig:
    """Test cases for TrainConfig"""

    def test_defaults(self):
        """Test desk-scale defaults"""
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.patch_size, cfg.patches_per_image) == (16, 1e-4, 48, 16)
        assert cfg.validate() == []

    def test_presets(self):
        """Test named presets"""
        assert load_config(None) == TrainConfig()
        assert load_config("tiny").model == ModelConfig.preset("tiny")

    def test_json_file(self, tmp_path):
        """Test a JSON file overrides defaults, including the nested model"""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"task": "jpeg", "quality": 20, "model": {"blocks": 2, "channels": 16}}))
        cfg = load_config(str(path))
        assert cfg.degradation() == DegradationTask("jpeg", quality=20)
        assert (cfg.model.blocks, cfg.model.channels, cfg.model.layers) == (2, 16, 6)

    def test_round_trip(self, micro_cfg):
        """Test to_dict / from_dict"""
        assert TrainConfig.from_dict(json.loads(json.dumps(micro_cfg.to_dict()))) == micro_cfg

    def test_unknown_key(self, tmp_path):
        """Test a misspelled key"""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"step": 10}))
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_invalid_json(self, tmp_path):
        """Test a file that is not JSON"""
        path = tmp_path / "cfg.json"
        path.write_text("{steps: 10")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        """Test a path that does not exist"""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))

    def test_overrides_skip_none(self):
        """Test None leaves the field untouched"""
        cfg = TrainConfig().with_overrides(steps=5, lr=None)
        assert cfg.steps == 5 and cfg.lr == 1e-4

    def test_validation(self):
        """Test invalid values are collected"""
        errors = TrainConfig(steps=0, batch_size=0, tile=16, overlap=8, task="blur").validate()
        assert len(errors) == 4
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0).check()


class TestTrainLog:
    """Test cases for TrainLog"""

    def test_monotone_steps(self):
        """Test steps must increase"""
        log = TrainLog()
        log.record_loss(1, 0.5)
        with pytest.raises(ContractError):
            log.record_loss(1, 0.4)

    def test_jsonl_sink(self, tmp_path):
        """Test records are appended as JSON lines"""
        log = TrainLog()
        log.attach(tmp_path / LOG_FILE)
        log.record_loss(1, 0.5)
        log.record_eval(1, 30.0, 0.9)
        lines = [json.loads(line) for line in (tmp_path / LOG_FILE).read_text().splitlines()]
        assert lines == [
            {"kind": "loss", "step": 1, "loss": 0.5},
            {"kind": "eval", "step": 1, "psnr": 30.0, "ssim": 0.9},
        ]

    def test_best_eval(self):
        """Test the best evaluation is the highest PSNR"""
        log = TrainLog()
        for step, value in [(1, 20.0), (2, 25.0), (3, 24.0)]:
            log.record_eval(step, value, 0.5)
        assert log.best_eval().step == 2


class TestBatchLoader:
    """Test cases for batch sampling"""

    def test_shapes(self, loader):
        """Test batch layout"""
        clean, degraded = loader.batch(1)
        assert clean.shape == degraded.shape == (2, 3, 16, 16)
        assert clean.min() >= 0.0 and clean.max() <= 1.0

    def test_noise_is_unclipped(self, micro_cfg):
        """Test noise on a black image keeps its negative half and full spread"""
        black = ImageBuffer.from_array(np.zeros((48, 48, 3), dtype=np.uint8))
        cfg = micro_cfg.with_overrides(sigma=25.0, patches_per_image=8, batch_size=8)
        clean, degraded = BatchLoader(build_patch_pool([black], cfg), cfg).batch(1)
        noise = (degraded - clean) * 255.0
        assert noise.min() < -25.0
        assert abs(noise.mean()) < 1.5
        assert 24.0 < noise.std() < 26.0
        assert not np.allclose(noise, np.round(noise))

    def test_jpeg_inputs_are_8bit(self, natural_image, micro_cfg):
        """Test JPEG degraded patches stay on the 8-bit grid"""
        cfg = micro_cfg.with_overrides(task="jpeg", quality=20)
        _, degraded = BatchLoader(build_patch_pool([natural_image], cfg), cfg).batch(1)
        np.testing.assert_allclose(degraded * 255.0, np.round(degraded * 255.0), atol=1e-9)
        assert degraded.min() >= 0.0 and degraded.max() <= 1.0

    def test_deterministic(self, natural_image, micro_cfg, loader):
        """Test the batch of a step depends only on the step"""
        other = BatchLoader(build_patch_pool([natural_image], micro_cfg), micro_cfg)
        for a, b in zip(loader.batch(2), other.batch(2)):
            np.testing.assert_array_equal(a, b)

    def test_epoch_is_a_permutation(self, natural_image, micro_cfg):
        """Test one epoch visits every patch once"""
        cfg = micro_cfg.with_overrides(patches_per_image=6)
        pool = build_patch_pool([natural_image], cfg)
        loader = BatchLoader(pool, cfg)
        visited = loader.indices(1) + loader.indices(2) + loader.indices(3)
        assert sorted(visited) == list(range(6))

    def test_frozen_noise(self, natural_image, micro_cfg):
        """Test resample_noise=False reuses each patch's degradation"""
        cfg = micro_cfg.with_overrides(resample_noise=False, patches_per_image=2, batch_size=2)
        loader = BatchLoader(build_patch_pool([natural_image], cfg), cfg)
        first = dict(zip(loader.indices(1), loader.batch(1)[1]))
        second = dict(zip(loader.indices(2), loader.batch(2)[1]))
        for index in first:
            np.testing.assert_array_equal(first[index], second[index])

    def test_empty_pool(self, micro_cfg):
        """Test a pool with no patches"""
        with pytest.raises(ConfigError):
            BatchLoader([], micro_cfg)

    def test_prefetch_matches_inline(self, loader):
        """Test the prefetch thread yields the same batches in step order"""
        inline = list(iterate_batches(loader, 4, prefetch=0))
        threaded = list(iterate_batches(loader, 4, prefetch=2))
        assert [step for step, _ in threaded] == [1, 2, 3, 4]
        for (_, (c1, d1)), (_, (c2, d2)) in zip(inline, threaded):
            np.testing.assert_array_equal(c1, c2)
            np.testing.assert_array_equal(d1, d2)

    def test_prefetch_propagates_errors(self, loader, monkeypatch):
        """Test a failure in the worker thread reaches the consumer"""
        def broken(step):
            raise ConfigError("boom")
        monkeypatch.setattr(loader, "batch", broken)
        with pytest.raises(ConfigError):
            list(iterate_batches(loader, 3, prefetch=1))


class TestTrainStep:
    """Test cases for a single optimization step"""

    def test_finite_positive_loss(self, loader):
        """Test one step returns a finite positive loss and moves parameters"""
        params = init_params(MICRO, seed=0)
        before = params["head.weight"].value.copy()
        loss = train_step(params, *loader.batch(1), MICRO, AdamConfig())
        assert math.isfinite(loss) and loss > 0.0
        assert not np.array_equal(before, params["head.weight"].value)

    def test_small_step_does_not_blow_up_loss(self, loader):
        """Test one Adam step at lr 1e-4 raises the frozen-batch loss by at most 10%"""
        params = init_params(MICRO, seed=1)
        clean, degraded = loader.batch(1)
        before = batch_loss(params, clean, degraded, MICRO)
        train_step(params, clean, degraded, MICRO, AdamConfig(lr=1e-4))
        assert batch_loss(params, clean, degraded, MICRO) <= 1.1 * before

    def test_non_finite_loss_skips_update(self, loader):
        """Test a NaN input leaves parameters untouched"""
        params = init_params(MICRO, seed=0)
        before = params.copy()
        clean, degraded = loader.batch(1)
        degraded = degraded.copy()
        degraded[0, 0, 0, 0] = np.nan
        assert math.isnan(train_step(params, clean, degraded, MICRO, AdamConfig()))
        for a, b in zip(before, params):
            np.testing.assert_array_equal(a.value, b.value)

    def test_non_finite_step_keeps_its_gradients(self, loader):
        """Test the failing step's gradients replace those of the previous step"""
        params = init_params(MICRO, seed=0)
        clean, degraded = loader.batch(1)
        train_step(params, clean, degraded, MICRO, AdamConfig())
        assert all(norm == 0.0 for norm in params.grad_norms().values())
        degraded = degraded.copy()
        degraded[0, 0, 0, 0] = np.inf
        assert not math.isfinite(train_step(params, clean, degraded, MICRO, AdamConfig()))
        assert not math.isfinite(params.grad_norms()["head.weight"])


class TestTrain:
    """Test cases for the training loop"""

    def test_outputs(self, tmp_path, image_dir, micro_cfg):
        """Test log, checkpoints and evaluation records"""
        cfg = micro_cfg.with_overrides(checkpoint_dir=str(tmp_path / "run"))
        trained, log = train(image_dir, cfg)
        assert [record.step for record in log.losses] == [1, 2, 3]
        assert [record.step for record in log.evals] == [2, 3]
        assert all(math.isfinite(record.loss) for record in log.losses)
        assert (tmp_path / "run" / BEST_CHECKPOINT).is_file()
        assert (tmp_path / "run" / LAST_CHECKPOINT).is_file()
        assert len((tmp_path / "run" / LOG_FILE).read_text().splitlines()) == 5
        assert trained.best_psnr == max(record.psnr for record in log.evals)

    def test_seeded_runs_are_identical(self, tmp_path, image_dir, micro_cfg):
        """Test same data, config and seed give identical logs and checkpoints"""
        runs = []
        for name, prefetch in [("a", 0), ("b", 0), ("c", 2)]:
            cfg = micro_cfg.with_overrides(checkpoint_dir=str(tmp_path / name), prefetch=prefetch)
            _, log = train(image_dir, cfg)
            runs.append((log, (tmp_path / name / LAST_CHECKPOINT).read_bytes(),
                         (tmp_path / name / LOG_FILE).read_text()))
        for other in runs[1:]:
            assert other[0] == runs[0][0]
            assert other[1] == runs[0][1]
            assert other[2] == runs[0][2]

    def test_seed_changes_run(self, image_dir, micro_cfg):
        """Test a different seed gives a different trajectory"""
        _, a = train(image_dir, micro_cfg)
        _, b = train(image_dir, micro_cfg.with_overrides(seed=1))
        assert a.losses != b.losses

    def test_empty_directory(self, tmp_path, micro_cfg):
        """Test a directory with no images"""
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigError):
            train(tmp_path / "empty", micro_cfg)

    def test_images_too_small(self, image_dir, micro_cfg):
        """Test every image smaller than the patch size"""
        with pytest.raises(ConfigError):
            train(image_dir, micro_cfg.with_overrides(patch_size=32))

    def test_divergence_dump(self, tmp_path, image_dir, micro_cfg, monkeypatch):
        """Test a non-finite loss stops training with a diagnostics file"""
        real_step = trainer.train_step
        calls = []

        def failing_step(params, clean, degraded, *rest):
            calls.append(None)
            if len(calls) == 2:
                degraded = degraded.copy()
                degraded[0, 0, 0, 0] = np.nan
            return real_step(params, clean, degraded, *rest)

        monkeypatch.setattr(trainer, "train_step", failing_step)
        out = tmp_path / "run"
        with pytest.raises(TrainingDivergedError) as info:
            train(image_dir, micro_cfg.with_overrides(checkpoint_dir=str(out)))
        assert info.value.diagnostics["step"] == 2
        dump = json.loads((out / DIVERGENCE_FILE).read_text())
        assert dump["step"] == 2 and dump["lr"] == micro_cfg.lr
        assert "head.weight" in dump["grad_norms"]
        assert any(not math.isfinite(norm) or norm > 0.0 for norm in dump["grad_norms"].values())


class TestEvaluate:
    """Test cases for checkpoint evaluation"""

    def test_identity_matches_baseline(self, identity_checkpoint, image_dir):
        """Test an identity model scores exactly the degraded images"""
        report = evaluate(identity_checkpoint, image_dir, tile=16, overlap=4)
        for row in report.rows:
            assert row.psnr == row.degraded_psnr
            assert row.ssim == row.degraded_ssim
        assert [row.name for row in report.rows] == ["a.ppm", "b.ppm"]

    def test_repeatable(self, identity_checkpoint, image_dir):
        """Test evaluating twice gives identical reports"""
        a = evaluate(identity_checkpoint, image_dir, tile=16, overlap=4)
        b = evaluate(identity_checkpoint, image_dir, tile=16, overlap=4)
        assert a == b

    def test_task_from_checkpoint(self, identity_checkpoint, image_dir):
        """Test the recorded task is used when none is given"""
        implicit = evaluate(identity_checkpoint, image_dir, tile=16, overlap=4)
        explicit = evaluate(identity_checkpoint, image_dir, DegradationTask("awgn", sigma=25.0), tile=16, overlap=4)
        assert implicit == explicit

    def test_task_mismatch(self, identity_checkpoint, image_dir):
        """Test a JPEG evaluation of a denoising checkpoint"""
        with pytest.raises(ContractError):
            evaluate(identity_checkpoint, image_dir, DegradationTask("jpeg", quality=10))

    def test_unreadable_task_echo(self, tmp_path, tiny_config, image_dir):
        """Test a checkpoint whose task metadata cannot be rebuilt"""
        path = tmp_path / "bad.cant"
        save_checkpoint(init_params(tiny_config, seed=0), tiny_config, path, {"task": {"kind": "awgn", "level": 5}})
        with pytest.raises(CheckpointError):
            evaluate(path, image_dir)

    def test_empty_directory(self, identity_checkpoint, tmp_path):
        """Test evaluation on a directory with no images"""
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigError):
            evaluate(identity_checkpoint, tmp_path / "empty")

    def test_trained_model_report(self, tmp_path, image_dir, micro_cfg):
        """Test the checkpoint written by training can be evaluated"""
        cfg = micro_cfg.with_overrides(checkpoint_dir=str(tmp_path / "run"))
        trained, _ = train(image_dir, cfg)
        report = evaluate(trained.checkpoint, image_dir, tile=16, overlap=4)
        assert len(report.rows) == len(load_image_dir(image_dir))
        assert 0.0 < report.ssim <= 1.0


class TestProtocols:
    """Test cases for overfit and ablation protocols"""

    def test_overfit_short(self, natural_image):
        """Test a short overfit run lowers the loss"""
        result = overfit_protocol(natural_image, model=MICRO, steps=30, lr=1e-3, patches=2, patch_size=16)
        assert len(result.log.losses) == 30
        assert result.final_loss < result.initial_loss

    def test_overfit_image_too_small(self, image_factory):
        """Test patches larger than the image"""
        with pytest.raises(ConfigError):
            overfit_protocol(image_factory(20, 20), model=MICRO, steps=1)

    def test_ablation_variants(self, tiny_config):
        """Test variant names and switches"""
        variants = dict(ablation_variants("components", tiny_config))
        assert list(variants) == ["element-wise", "+concatenation", "+feature-selection", "+feature-attention"]
        assert variants["element-wise"].combine == "add"
        assert variants["+feature-attention"] == tiny_config
        assert [name for name, _ in ablation_variants("blocks")] == [f"{n}-blocks" for n in range(1, 6)]

    def test_unknown_ablation(self):
        """Test an unknown ablation kind"""
        with pytest.raises(ConfigError):
            ablation_variants("depth")

    def test_ablation_records(self, natural_image):
        """Test every variant emits a comparable record"""
        records = run_ablation("components", natural_image, steps=2, base=MICRO)
        assert len(records) == 4
        assert len({record.params for record in records}) == 4
        assert all(math.isfinite(record.final_loss) for record in records)

    @pytest.mark.slow
    def test_overfit_tiny_full(self, natural_image):
        """Test CANet-tiny overfits four 48×48 noisy patches"""
        result = overfit_protocol(natural_image, steps=2000, lr=1e-3)
        assert result.loss_ratio < 0.1
        assert result.psnr_gain >= 3.0

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", ["components", "blocks"])
    def test_ablation_full(self, natural_image, kind):
        """Test the full-length ablation harness completes"""
        records = run_ablation(kind, natural_image, steps=2000, lr=1e-3)
        assert all(record.final_loss < record.initial_loss for record in records)
