"""
Tests for the assembled model and its per-stage losses.
"""

from unittest.mock import patch

import pytest
import torch

from clean_codes.corpus import generate_noise, make_noisy_pair, synth_clean
from clean_codes.data import PairedDataset
from clean_codes.model import CleanCodesModel
from clean_codes.trainer import build_model


def toy_batch(dtype=torch.float32):
    pairs = [
        make_noisy_pair(synth_clean(3 + i, seed=i, alphabet="abcdef"), generate_noise("car", 0.5, seed=9),
                        5.0, seed=i)
        for i in range(2)
    ]
    return PairedDataset.from_pairs(pairs, noise_type="car").batch([0, 1], dtype)


class TestCleanCodesModel:
    """Test cases for CleanCodesModel."""

    def test_components(self, tiny_config):
        """Test the model wires a codebook, predictor, fusion and 30-way CTC head."""
        model = CleanCodesModel.from_config(tiny_config)

        assert model.codebook.num_entries == 8
        assert model.ctc_head.out_features == 30
        assert model.fusion.bottleneck_dim == 4

    def test_codebook_disabled(self, tiny_config):
        """Test the baseline has no codebook and trains on CTC alone."""
        model = CleanCodesModel.from_config(tiny_config.with_overrides({"codebook.enabled": False}))

        output = model.finetune_forward(toy_batch())

        assert model.codebook is None and model.predictor is None
        assert output.pred is None
        assert torch.equal(output.loss, output.ctc)

    def test_pretrain_backbone_loss(self, tiny_config):
        """Test the pre-training loss is finite and reports its terms."""
        model = build_model(tiny_config)

        loss, stats = model.pretrain_backbone_loss(toy_batch(), seed=0, generator=torch.Generator().manual_seed(0))

        assert torch.isfinite(loss)
        assert set(stats) >= {"contrastive", "diversity", "feature", "consistency"}
        loss.backward()
        assert model.backbone.quantizer.weight_proj.weight.grad is not None

    def test_pretrain_codebook_loss(self, tiny_config):
        """Test codebook pre-training returns the valid clean frames."""
        model = build_model(tiny_config)
        batch = toy_batch()

        loss, stats, frames = model.pretrain_codebook_loss(batch)

        assert torch.isfinite(loss)
        assert frames.shape[0] == int(model.backbone.represent(batch.clean, batch.lengths).lengths.sum())
        assert 1.0 <= stats["perplexity"] <= 8.0

    def test_finetune_outputs(self, tiny_config):
        """Test the finetune forward pass shapes and loss composition."""
        model = build_model(tiny_config)

        output = model.finetune_forward(toy_batch(), torch.Generator().manual_seed(0))

        assert output.log_probs.shape[-1] == 30
        assert output.predicted_ids.shape == output.truth_ids.shape
        expected = output.ctc + 0.1 * output.pred + 0.1 * output.res
        assert torch.allclose(output.loss, expected)

    def test_finetune_gradient(self, tiny_config):
        """Test the finetune loss gradient against central finite differences."""
        config = tiny_config.with_overrides({"predictor.hard_select": False})
        model = build_model(config, torch.float64)
        batch = toy_batch(torch.float64)
        truth = model.truth_codes(batch)

        def loss_value():
            generator = torch.Generator().manual_seed(0)
            return model.finetune_forward(batch, generator, truth).loss

        model.zero_grad()
        loss_value().backward()
        samples = [
            (model.ctc_head.bias, 5),
            (model.predictor.output.bias, 2),
            (model.fusion.merge.conv.bias, 1),
        ]
        eps = 1e-6
        for parameter, index in samples:
            analytic = float(parameter.grad[index])
            with torch.no_grad():
                parameter[index] += eps
                upper = float(loss_value())
                parameter[index] -= 2 * eps
                lower = float(loss_value())
                parameter[index] += eps
            assert analytic == pytest.approx((upper - lower) / (2 * eps), rel=1e-4, abs=1e-7)

    def test_representations(self, tiny_config):
        """Test exported representations share the frame axis."""
        model = build_model(tiny_config)
        reps = model.representations(toy_batch())

        T = reps["Z_n"].shape[1]
        for key in ("Z_c", "Z_q", "Z_f"):
            assert reps[key].shape == (2, T, 16)
        assert reps["Z_q_ids"].shape == (2, T)
        assert model.training

    def test_transcribe(self, tiny_config):
        """Test greedy transcription returns one hypothesis per utterance."""
        model = build_model(tiny_config)
        result = model.transcribe(toy_batch())

        assert len(result.hypotheses) == 2
        assert result.extras["truth_codes"].shape == result.predicted_codes.shape


class TestPretrainBackboneLoss:
    """Test cases for the combined backbone pre-training objective."""

    def test_contrastive_term_averages_over_masked_frames(self, tiny_config):
        """Test utterances with more masked frames weigh more in the contrastive term."""
        model = build_model(tiny_config)
        sizes = []

        def frame_count_loss(z_masked, targets, k, kappa, seed):
            sizes.append(z_masked.shape[0])
            return z_masked.new_tensor(float(z_masked.shape[0]))

        with patch("clean_codes.model.contrastive_loss", side_effect=frame_count_loss):
            _, stats = model.pretrain_backbone_loss(toy_batch(), seed=0, generator=torch.Generator().manual_seed(0))

        assert len(sizes) == 2
        assert stats["contrastive"] == pytest.approx(sum(n * n for n in sizes) / sum(sizes))

    def test_gradient_matches_finite_differences(self, tiny_config):
        """Test the whole-loss gradient on a random parameter subset against central differences."""
        model = build_model(tiny_config, torch.float64)
        # argmax targets keep the loss smooth in every parameter
        model.backbone.quantizer.eval()
        batch = toy_batch(torch.float64)

        def loss_value():
            return model.pretrain_backbone_loss(batch, seed=0, generator=torch.Generator().manual_seed(0))[0]

        model.zero_grad()
        loss_value().backward()

        groups = {}
        for name, parameter in model.backbone.named_parameters():
            groups.setdefault(name.split(".")[0], []).append((name, parameter))
        picker = torch.Generator().manual_seed(3)
        samples = []
        for group in sorted(groups):
            members = groups[group]
            for j in torch.randperm(len(members), generator=picker)[:3].tolist():
                name, parameter = members[j]
                samples.append((name, parameter, int(torch.randint(parameter.numel(), (1,), generator=picker))))

        eps = 1e-6
        for name, parameter, index in samples:
            analytic = 0.0 if parameter.grad is None else float(parameter.grad.view(-1)[index])
            flat = parameter.data.view(-1)
            flat[index] += eps
            upper = float(loss_value())
            flat[index] -= 2 * eps
            lower = float(loss_value())
            flat[index] += eps
            assert analytic == pytest.approx((upper - lower) / (2 * eps), rel=1e-3, abs=1e-6), name


class TestCodeSelection:
    """Test cases for choosing codebook entries from predictor logits."""

    def test_nn_matching_is_deterministic(self, tiny_config):
        """Test the NN-matching baseline picks the nearest entry even while training."""
        model = build_model(tiny_config.with_overrides({"predictor.kind": "nn_matching"}))
        logits = torch.randn(2, 5, 8, generator=torch.Generator().manual_seed(0))

        first = model.select_codes(logits, torch.Generator().manual_seed(1))
        second = model.select_codes(logits, torch.Generator().manual_seed(2))

        assert model.training
        assert torch.equal(first.ids, logits.argmax(-1))
        assert torch.equal(second.ids, first.ids)

    def test_learned_predictor_samples(self, tiny_config):
        """Test learned predictors draw gumbel samples while training."""
        model = build_model(tiny_config)
        logits = torch.zeros(1, 200, 8)

        codes = model.select_codes(logits, torch.Generator().manual_seed(1))

        assert len(set(codes.ids.flatten().tolist())) > 1
