"""
Tests for staged training, the learning-rate schedule, augmentation,
checkpoints and evaluation.
"""

import json
import os
import tempfile
from unittest.mock import patch

import numpy as np
import pytest
import torch

from clean_codes.backbone import WaveFeatures
from clean_codes.errors import InvalidArgumentError, InvalidStateError
from clean_codes.model import CleanCodesModel
from clean_codes.trainer import (AugmentSpec, Checkpoint, StageConfig, apply_augment, build_model, checkpoint_path,
                                 evaluate, load_pretrained, model_from_checkpoint, pretrain_codebook_step,
                                 run_stage, schedule_lr)

RANDOM_START = {"train.allow_random_backbone": True, "train.allow_random_codebook": True}


class TestScheduleLR:
    """Test cases for the warmup/decay schedule."""

    def test_endpoints_and_peak(self):
        """Test zero at both ends and the peak at the end of warmup."""
        assert schedule_lr(0, 100, 5e-4, 0.2) == 0.0
        assert schedule_lr(20, 100, 5e-4, 0.2) == pytest.approx(5e-4)
        assert schedule_lr(100, 100, 5e-4, 0.2) == 0.0

    def test_shape(self):
        """Test the schedule rises monotonically then falls monotonically."""
        values = [schedule_lr(s, 100, 1.0, 0.2) for s in range(101)]
        peak = int(np.argmax(values))

        assert peak == 20
        assert all(a <= b for a, b in zip(values[:peak], values[1:peak + 1]))
        assert all(a >= b for a, b in zip(values[peak:], values[peak + 1:]))
        assert max(abs(a - b) for a, b in zip(values, values[1:])) <= 1.0 / 20 + 1e-12

    @pytest.mark.parametrize("args", [(5, 0, 1.0, 0.2), (101, 100, 1.0, 0.2), (5, 100, 1.0, 0.0)])
    def test_invalid(self, args):
        """Test out-of-range arguments are rejected."""
        with pytest.raises(InvalidArgumentError):
            schedule_lr(*args)


class TestStageConfig:
    """Test cases for StageConfig."""

    def test_finetune_freezes_codebook(self, tiny_config):
        """Test finetuning freezes the codebook unless configured otherwise."""
        assert StageConfig.from_config(tiny_config, "finetune").freeze == frozenset({"codebook"})
        unfrozen = tiny_config.with_overrides({"codebook.frozen": False, "train.freeze_encoder": True})
        assert StageConfig.from_config(unfrozen, "finetune").freeze == frozenset({"encoder"})
        assert StageConfig.from_config(tiny_config, "pretrain_backbone").steps == 3

    def test_invalid(self):
        """Test unknown stages and contradictory freezes are rejected."""
        with pytest.raises(InvalidArgumentError):
            StageConfig(stage="distill", steps=1)
        with pytest.raises(InvalidArgumentError):
            StageConfig(stage="pretrain_codebook", steps=1, freeze=frozenset({"codebook"}))
        with pytest.raises(InvalidArgumentError):
            StageConfig(stage="finetune", steps=1, freeze=frozenset({"decoder"}))


class TestAugment:
    """Test cases for feature augmentation."""

    def test_zero_probabilities(self):
        """Test zero mask probabilities are the identity."""
        features = torch.randn(2, 10, 8)

        assert apply_augment(features, AugmentSpec(0.0, 3, 0.0, 2), seed=0) is features

    def test_full_channel_span(self):
        """Test a triggered span of D channels zeroes the whole embedding."""
        features = torch.randn(3, 10, 8)

        out = apply_augment(features, AugmentSpec(0.0, 3, 1.0, 8), seed=0)

        assert torch.equal(out, torch.zeros_like(features))

    def test_time_mask_uses_embedding(self):
        """Test masked frames take the mask embedding and padding is left alone."""
        features = WaveFeatures(values=torch.randn(2, 6, 4), frame_shift_ms=5.0, lengths=torch.tensor([6, 3]))
        embedding = torch.arange(4.0)

        out = apply_augment(features, AugmentSpec(1.0, 2, 0.0, 1), seed=0, mask_embedding=embedding)

        assert torch.equal(out.values[0], embedding.expand(6, 4))
        assert torch.equal(out.values[1, 3:], features.values[1, 3:])

    def test_masked_fraction(self):
        """Test the time-mask fraction matches the union-of-spans expectation."""
        T, p, span = 100, 0.065, 10
        spec = AugmentSpec(p, span, 0.0, 1)
        fractions = []
        for seed in range(100):
            out = apply_augment(torch.zeros(100, T, 2), spec, seed=seed, mask_embedding=torch.ones(2))
            fractions.append(float(out[..., 0].mean()))
        expected = np.mean([1.0 - (1.0 - p) ** min(t + 1, span) for t in range(T)])

        assert abs(np.mean(fractions) - expected) < 0.02

    def test_invalid(self):
        """Test invalid probabilities and oversized channel spans."""
        with pytest.raises(InvalidArgumentError):
            AugmentSpec(time_mask_prob=1.5)
        with pytest.raises(InvalidArgumentError):
            apply_augment(torch.zeros(1, 4, 4), AugmentSpec(0.1, 2, 0.1, 8), seed=0)


class TestCheckpoint:
    """Test cases for checkpoint files."""

    def test_round_trip(self, tiny_config):
        """Test a saved checkpoint reloads into an identical model."""
        model = build_model(tiny_config)
        checkpoint = Checkpoint(stage="finetune", step=2, model_state=model.state_dict(),
                                config=tiny_config.to_dict(), loss_curve=[3.0, 2.0])

        with tempfile.TemporaryDirectory() as tmp:
            path = checkpoint_path(tmp, "finetune")
            checkpoint.save(path)
            loaded = Checkpoint.load(path)

        restored = model_from_checkpoint(loaded)
        assert loaded.step == 2 and loaded.loss_curve == [3.0, 2.0]
        for name, value in model.state_dict().items():
            assert torch.equal(restored.state_dict()[name], value)

    def test_missing(self):
        """Test loading a missing checkpoint is an invalid state."""
        with pytest.raises(InvalidStateError):
            Checkpoint.load("/nonexistent/finetune.pt")

    def test_load_pretrained_prefixes(self, tiny_config):
        """Test only the requested parts are copied."""
        source = build_model(tiny_config.with_overrides({"train.seed": 1}))
        target = build_model(tiny_config)
        checkpoint = Checkpoint(stage="pretrain_backbone", step=1, model_state=source.state_dict(),
                                config=tiny_config.to_dict())

        loaded = load_pretrained(target, checkpoint, ("backbone",))

        assert all(name.startswith("backbone.") for name in loaded)
        assert torch.equal(target.backbone.context.mask_embedding, source.backbone.context.mask_embedding)
        assert not torch.equal(target.ctc_head.weight, source.ctc_head.weight)


class TestRunStage:
    """Test cases for running training stages."""

    def test_finetune_needs_codebook(self, tiny_config, train_set):
        """Test finetuning without a codebook checkpoint is an invalid state."""
        with pytest.raises(InvalidStateError, match="allow-random-codebook"):
            run_stage(tiny_config, "finetune", train_set)

    def test_codebook_needs_backbone(self, tiny_config, train_set):
        """Test codebook pre-training without a backbone checkpoint is an invalid state."""
        with pytest.raises(InvalidStateError):
            run_stage(tiny_config, "pretrain_codebook", train_set)

    def test_deterministic(self, tiny_config, train_set):
        """Test two runs with the same seed give the same loss curve."""
        first = run_stage(tiny_config, "pretrain_backbone", train_set).loss_curve
        second = run_stage(tiny_config, "pretrain_backbone", train_set).loss_curve

        assert len(first) == 3
        assert np.allclose(first, second, atol=1e-6, rtol=0)

    def test_resume_matches_uninterrupted(self, tiny_config, train_set):
        """Test stopping and resuming reproduces the uninterrupted run."""
        config = tiny_config.with_overrides(RANDOM_START)
        full = run_stage(config, "pretrain_codebook", train_set)

        with tempfile.TemporaryDirectory() as tmp:
            partial = run_stage(config, "pretrain_codebook", train_set, stop_at=2)
            partial.checkpoint.save(os.path.join(tmp, "partial.pt"))
            resumed = run_stage(config, "pretrain_codebook", train_set,
                                resume=Checkpoint.load(os.path.join(tmp, "partial.pt")))

        assert partial.checkpoint.step == 2
        assert np.allclose(resumed.loss_curve, full.loss_curve, atol=1e-6, rtol=0)
        assert torch.allclose(resumed.model.codebook.entries, full.model.codebook.entries, atol=1e-6)

    def test_resume_wrong_stage(self, tiny_config, train_set):
        """Test a checkpoint of another stage cannot be resumed."""
        result = run_stage(tiny_config, "pretrain_backbone", train_set, stop_at=1)

        with pytest.raises(InvalidStateError):
            run_stage(tiny_config.with_overrides(RANDOM_START), "pretrain_codebook", train_set,
                      resume=result.checkpoint)

    def test_frozen_codebook_unchanged(self, tiny_config, train_set):
        """Test finetuning leaves a frozen codebook bit-identical."""
        config = tiny_config.with_overrides(RANDOM_START)
        initial = build_model(config).codebook.entries.detach().clone()

        result = run_stage(config, "finetune", train_set)

        assert torch.equal(result.model.codebook.entries, initial)
        assert not torch.equal(result.model.ctc_head.weight, build_model(config).ctc_head.weight)

    def test_pipeline_through_out_dir(self, tiny_config, train_set):
        """Test stages find their dependencies in the output directory."""
        with tempfile.TemporaryDirectory() as tmp:
            run_stage(tiny_config, "pretrain_backbone", train_set, tmp)
            codebook = run_stage(tiny_config, "pretrain_codebook", train_set, tmp)
            run_stage(tiny_config, "finetune", train_set, tmp)

            for stage in ("pretrain_backbone", "pretrain_codebook", "finetune"):
                assert os.path.exists(checkpoint_path(tmp, stage))
                with open(os.path.join(tmp, f"{stage}.loss.json")) as f:
                    assert len(json.load(f)) == 3
            finetuned = Checkpoint.load(checkpoint_path(tmp, "finetune"))

        assert bool(codebook.model.codebook.initialized)
        assert torch.equal(finetuned.codebook["entries"], codebook.checkpoint.codebook["entries"])

    def test_baseline_without_codebook(self, tiny_config, train_set):
        """Test the codebook-free baseline finetunes from a random backbone."""
        config = tiny_config.with_overrides({"codebook.enabled": False, "train.allow_random_backbone": True})

        result = run_stage(config, "finetune", train_set)

        assert result.model.codebook is None
        assert result.checkpoint.codebook is None
        assert all(np.isfinite(result.loss_curve))

    def test_evaluate(self, tiny_config, train_set, test_set):
        """Test evaluation reports WER and code accuracy per condition."""
        result = run_stage(tiny_config.with_overrides(RANDOM_START), "finetune", train_set)

        report = evaluate(model_from_checkpoint(result.checkpoint), test_set, batch_size=4,
                          loss_curves={"finetune": result.loss_curve})

        assert sum(report.n_utts_by_condition.values()) == 7
        assert ("traffic", 0) in report.wer_by_condition
        assert all(0.0 <= acc <= 1.0 for acc in report.code_accuracy_by_condition.values())
        assert report.loss_curves["finetune"] == result.loss_curve

    def test_resume_restores_rng_state(self, tiny_config, train_set):
        """Test resuming puts back the global torch RNG state stored in the checkpoint."""
        partial_run = run_stage(tiny_config, "pretrain_backbone", train_set, stop_at=2)
        stored = torch.Generator().manual_seed(1234).get_state()
        partial_run.checkpoint.rng_state = stored

        resumed = run_stage(tiny_config, "pretrain_backbone", train_set, resume=partial_run.checkpoint, stop_at=2)

        assert torch.equal(resumed.checkpoint.rng_state, stored)

    @pytest.mark.slow
    def test_frozen_codebook_survives_long_finetune(self, tiny_config, train_set):
        """Test a frozen codebook stays bit-identical over 10k finetune steps."""
        config = tiny_config.with_overrides({**RANDOM_START, "train.finetune.steps": 10000,
                                             "train.log_every": 1000})
        initial = build_model(config).codebook.entries.detach().clone()

        result = run_stage(config, "finetune", train_set)

        assert len(result.loss_curve) == 10000
        assert torch.equal(result.model.codebook.entries, initial)

    @pytest.mark.slow
    def test_finetune_halves_ctc(self, tiny_config, train_set):
        """Test 2000 toy finetune steps bring the CTC loss below half its initial value."""
        config = tiny_config.with_overrides({**RANDOM_START, "train.finetune.steps": 2000,
                                             "train.finetune.warmup_frac": 0.1, "train.log_every": 200})
        batch = train_set.batch(list(range(len(train_set))))

        def mean_ctc(model):
            model.eval()
            with torch.no_grad():
                return float(model.finetune_forward(batch).ctc)

        before = mean_ctc(build_model(config))
        after = mean_ctc(run_stage(config, "finetune", train_set).model)

        assert after < 0.5 * before


class TestPretrainCodebookStep:
    """Test cases for a single codebook pre-training update."""

    def test_single_step_updates_codebook(self, tiny_config, train_set):
        """Test one step moves the codebook entries and returns the clean frames."""
        model = build_model(tiny_config)
        model.codebook.unfreeze()
        batch = train_set.batch([0, 1, 2, 3])
        with torch.no_grad():
            z_c = model.clean_representation(batch)
            model.codebook.init_from(z_c.values[~z_c.padding_mask], seed=0)
        before = model.codebook.entries.detach().clone()
        optimizer = torch.optim.Adam(model.codebook.parameters(), lr=1e-2)

        update = pretrain_codebook_step(batch, model, optimizer)

        assert np.isfinite(update.loss)
        assert update.frames.shape == (int(z_c.lengths.sum()), 16)
        assert not update.frames.requires_grad
        assert not torch.equal(model.codebook.entries, before)
        assert set(update.stats) == {"loss", "perplexity"}

    def test_non_finite_loss_rejected(self, tiny_config, train_set):
        """Test a non-finite loss stops the step before the optimizer runs."""
        model = build_model(tiny_config)
        before = model.codebook.entries.detach().clone()
        optimizer = torch.optim.Adam(model.codebook.parameters(), lr=1e-2)
        bad = (torch.tensor(float("nan"), requires_grad=True), {"loss": float("nan")}, torch.zeros(1, 16))

        with patch.object(CleanCodesModel, "pretrain_codebook_loss", return_value=bad):
            with pytest.raises(InvalidStateError):
                pretrain_codebook_step(train_set.batch([0]), model, optimizer)

        assert torch.equal(model.codebook.entries, before)
