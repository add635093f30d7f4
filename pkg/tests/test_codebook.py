"""
Tests for the clean-speech codebook and its pre-training objective.
"""

import pytest
import torch

from clean_codes.codebook import (Codebook, CodeSequence, QuantizedRepr, codebook_pretrain_loss,
                                  codebook_quantize_loss)
from clean_codes.errors import InvalidArgumentError, InvalidStateError


def codebook_with(entries) -> Codebook:
    entries = torch.as_tensor(entries, dtype=torch.float64)
    codebook = Codebook(entries.shape[0], entries.shape[1]).double()
    codebook.entries.data.copy_(entries)
    return codebook


class TestNNLookup:
    """Test cases for nearest-neighbour code lookup."""

    def test_nearest_entry(self):
        """Test (1,1) maps to (0,0) rather than (3,4)."""
        codebook = codebook_with([[0.0, 0.0], [3.0, 4.0]])

        assert codebook.nn_lookup(torch.tensor([[1.0, 1.0]], dtype=torch.float64)).ids.tolist() == [0]

    def test_exact_match(self):
        """Test a frame equal to an entry reconstructs with zero error."""
        codebook = codebook_with([[0.0, 0.0], [3.0, 4.0]])
        frame = torch.tensor([[3.0, 4.0]], dtype=torch.float64)

        codes = codebook.nn_lookup(frame)

        assert codes.ids.tolist() == [1]
        assert torch.equal(codebook.quantize(codes).values, frame)

    def test_tie_goes_to_lowest_index(self):
        """Test equidistant entries resolve to the lowest index."""
        codebook = codebook_with([[1.0, 0.0], [-1.0, 0.0]])

        assert codebook.nn_lookup(torch.zeros(1, 2, dtype=torch.float64)).ids.tolist() == [0]

    def test_exhaustive_oracle(self):
        """Test lookup against a brute-force scan over random instances."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(1000):
            T = int(torch.randint(1, 33, (1,), generator=generator))
            N = int(torch.randint(2, 129, (1,), generator=generator))
            D = int(torch.randint(1, 65, (1,), generator=generator))
            codebook = codebook_with(torch.randn(N, D, generator=generator, dtype=torch.float64))
            frames = torch.randn(T, D, generator=generator, dtype=torch.float64)

            brute = torch.stack([((codebook.entries - f) ** 2).sum(-1) for f in frames]).argmin(-1)

            assert torch.equal(codebook.nn_lookup(frames).ids, brute)

    def test_batched_shape(self):
        """Test (B, T, D) frames give (B, T) ids."""
        codebook = Codebook(8, 4)

        assert codebook.nn_lookup(torch.randn(2, 5, 4)).ids.shape == (2, 5)

    def test_dim_mismatch(self):
        """Test frames of the wrong width are rejected."""
        with pytest.raises(InvalidArgumentError):
            Codebook(8, 4).nn_lookup(torch.randn(3, 5))


class TestCodebookState:
    """Test cases for initialisation, freezing and dead-code reseeding."""

    def test_too_small(self):
        """Test that a codebook needs at least two entries."""
        with pytest.raises(InvalidArgumentError):
            Codebook(1, 4)

    def test_code_range_checked(self):
        """Test CodeSequence rejects ids outside the codebook."""
        with pytest.raises(InvalidArgumentError):
            CodeSequence(torch.tensor([0, 8]), 8)
        with pytest.raises(InvalidArgumentError):
            QuantizedRepr(torch.zeros(1), "guessed")

    def test_kmeans_init_uses_frames(self):
        """Test k-means++ seeding picks entries from the given frames."""
        codebook = Codebook(4, 3)
        frames = torch.randn(50, 3)

        codebook.init_from(frames, seed=1)

        assert bool(codebook.initialized)
        for entry in codebook.entries:
            assert torch.isclose(frames, entry).all(dim=-1).any()

    def test_init_with_few_frames(self):
        """Test seeding with fewer frames than entries still fills every row."""
        codebook = Codebook(8, 3)
        codebook.init_from(torch.randn(3, 3), seed=0)

        assert torch.isfinite(codebook.entries).all()

    def test_freeze(self):
        """Test freezing stops usage counting and pretraining."""
        codebook = Codebook(4, 2).freeze()
        codebook.nn_lookup(torch.randn(10, 2))

        assert codebook.frozen
        assert int(codebook.usage.sum()) == 0
        with pytest.raises(InvalidStateError):
            codebook_quantize_loss(codebook, torch.randn(10, 2))

    def test_dead_codes_reseeded(self):
        """Test codes unused for an epoch are reseeded from frames."""
        codebook = codebook_with([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0], [10.0, -10.0]])
        codebook.dead_code_epochs = 1
        frames = 0.01 * torch.randn(20, 2, dtype=torch.float64)
        codebook.nn_lookup(frames)

        reseeded = codebook.end_epoch(frames, seed=0)

        assert reseeded == 3
        for entry in codebook.entries[1:]:
            assert torch.isclose(frames, entry).all(dim=-1).any()
        assert int(codebook.usage.sum()) == 0

    def test_perplexity(self):
        """Test perplexity is N for uniform usage and 1 for a single code."""
        codebook = Codebook(4, 2)

        assert codebook.perplexity(CodeSequence(torch.arange(4), 4)) == pytest.approx(4.0)
        assert codebook.perplexity(CodeSequence(torch.zeros(5, dtype=torch.long), 4)) == pytest.approx(1.0)


class TestPretrainLoss:
    """Test cases for the codebook and commitment objective."""

    def test_zero_when_equal(self):
        """Test the loss vanishes when frames equal their codes."""
        z = torch.randn(5, 3)

        assert float(codebook_pretrain_loss(z, z.clone())) == 0.0

    def test_gradient_routing(self):
        """Test the scalar example: dL/dZc = 0.3 and dL/dZq = -1.2."""
        z_c = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        z_q = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)

        codebook_pretrain_loss(z_c, z_q, beta_commit=0.25).backward()

        assert float(z_c.grad) == pytest.approx(0.3, abs=1e-12)
        assert float(z_q.grad) == pytest.approx(-1.2, abs=1e-12)

    def test_gradient_by_finite_differences(self):
        """Test each input's gradient with the other's path stopped."""
        eps = 1e-6

        def loss(c, q):
            return float(codebook_pretrain_loss(torch.tensor([c]), torch.tensor([q]), 0.25))

        # stop-gradient means each side only sees its own term
        d_c = (0.25 * ((1.0 + eps - 0.4) ** 2 - (1.0 - eps - 0.4) ** 2)) / (2 * eps)
        d_q = (((0.4 + eps - 1.0) ** 2 - (0.4 - eps - 1.0) ** 2)) / (2 * eps)
        assert d_c == pytest.approx(0.3, abs=1e-6)
        assert d_q == pytest.approx(-1.2, abs=1e-6)
        assert loss(1.0, 0.4) == pytest.approx(1.25 * 0.36, rel=1e-6)

    def test_shape_mismatch(self):
        """Test mismatched shapes are rejected."""
        with pytest.raises(InvalidArgumentError):
            codebook_pretrain_loss(torch.zeros(2, 3), torch.zeros(3, 3))

    def test_zero_learning_rate(self):
        """Test a step at learning rate 0 leaves entries bit-identical."""
        codebook = Codebook(8, 4)
        before = codebook.entries.detach().clone()
        optimizer = torch.optim.Adam(codebook.parameters(), lr=0.0)

        loss, _ = codebook_quantize_loss(codebook, torch.randn(20, 4))
        loss.backward()
        optimizer.step()

        assert torch.equal(codebook.entries, before)

    @pytest.mark.slow
    def test_loss_decreases(self):
        """Test 200 steps on a fixed batch decrease the loss over every 50-step window."""
        generator = torch.Generator().manual_seed(0)
        frames = torch.randn(64, 8, generator=generator, dtype=torch.float64)
        codebook = Codebook(8, 8).double()
        codebook.init_from(frames, seed=0)
        optimizer = torch.optim.SGD(codebook.parameters(), lr=1.0)

        losses = []
        for _ in range(200):
            optimizer.zero_grad()
            loss, _ = codebook_quantize_loss(codebook, frames)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        assert all(losses[t + 50] < losses[t] for t in range(len(losses) - 50))
