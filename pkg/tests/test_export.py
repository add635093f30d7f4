"""
Tests for representation and codebook export.
"""

import json
import os
import tempfile

import numpy as np
import pytest

from clean_codes.config import CleanCodesConfig
from clean_codes.errors import InvalidArgumentError, InvalidStateError
from clean_codes.export import export_features, pca_projection
from clean_codes.trainer import Checkpoint, build_model


def make_checkpoint(config):
    model = build_model(config)
    return Checkpoint(stage="pretrain_codebook", step=0, model_state=model.state_dict(), config=config.to_dict())


class TestExportCodebook:
    """Test cases for exporting codebook entries."""

    def test_default_codebook_shape(self):
        """Test the default codebook exports as a 64 x 64 float32 matrix."""
        checkpoint = make_checkpoint(CleanCodesConfig(None))

        with tempfile.TemporaryDirectory() as tmp:
            result = export_features(checkpoint, None, "codebook", tmp)
            matrix = np.load(result.matrix_path)
            with open(result.meta_path) as f:
                meta = json.load(f)
            with open(result.pca_path) as f:
                pca_lines = f.read().splitlines()

        assert result.shape == (64, 64)
        assert matrix.dtype == np.float32 and matrix.flags["C_CONTIGUOUS"]
        assert meta["num_entries"] == 64 and meta["shape"] == [64, 64]
        assert pca_lines[0] == "row,pc1,pc2" and len(pca_lines) == 65

    def test_export_is_reproducible(self, tiny_config):
        """Test exporting the same checkpoint twice gives identical files."""
        checkpoint = make_checkpoint(tiny_config)
        contents = []

        with tempfile.TemporaryDirectory() as tmp:
            for run in ("a", "b"):
                result = export_features(checkpoint, None, "codebook", os.path.join(tmp, run))
                contents.append([open(p, "rb").read() for p in (result.matrix_path, result.meta_path, result.pca_path)])

        assert contents[0] == contents[1]

    def test_codebook_disabled(self, tiny_config):
        """Test codebook kinds on a codebook-free checkpoint are an invalid state."""
        checkpoint = make_checkpoint(tiny_config.with_overrides({"codebook.enabled": False}))

        with tempfile.TemporaryDirectory() as tmp:
            for which in ("Z_q", "Z_f", "codebook"):
                with pytest.raises(InvalidStateError):
                    export_features(checkpoint, None, which, tmp)

    def test_unknown_kind(self, tiny_config):
        """Test an unknown export kind is rejected."""
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(InvalidArgumentError):
                export_features(make_checkpoint(tiny_config), None, "Z_x", tmp)


class TestExportRepresentations:
    """Test cases for exporting per-frame representations."""

    def test_noisy_representations(self, tiny_config, tiny_manifest):
        """Test frame offsets tile the exported matrix."""
        with tempfile.TemporaryDirectory() as tmp:
            result = export_features(make_checkpoint(tiny_config), tiny_manifest, "Z_n", tmp, batch_size=3)
            matrix = np.load(result.matrix_path)
            with open(result.meta_path) as f:
                meta = json.load(f)

        utterances = meta["utterances"]
        assert len(utterances) == 7
        assert matrix.shape == (sum(u["frames"] for u in utterances), 16)
        assert [u["offset"] for u in utterances] == list(np.cumsum([0] + [u["frames"] for u in utterances[:-1]]))
        assert "code_ids" not in utterances[0]

    def test_quantized_representations_carry_ids(self, tiny_config, tiny_manifest):
        """Test Z_q rows equal the codebook rows named by their code ids."""
        checkpoint = make_checkpoint(tiny_config)

        with tempfile.TemporaryDirectory() as tmp:
            z_q = export_features(checkpoint, tiny_manifest, "Z_q", os.path.join(tmp, "zq"))
            entries = np.load(export_features(checkpoint, None, "codebook", os.path.join(tmp, "cb")).matrix_path)
            matrix = np.load(z_q.matrix_path)
            with open(z_q.meta_path) as f:
                meta = json.load(f)

        ids = [c for u in meta["utterances"] for c in u["code_ids"]]
        assert np.allclose(matrix, entries[ids], atol=1e-6)

    def test_needs_manifest(self, tiny_config):
        """Test representation exports require a manifest."""
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(InvalidArgumentError):
                export_features(make_checkpoint(tiny_config), None, "Z_c", tmp)


class TestPCAProjection:
    """Test cases for the PCA helper."""

    def test_variance_ordering(self):
        """Test the first component carries at least as much variance as the second."""
        rng = np.random.default_rng(0)
        matrix = rng.standard_normal((200, 5)) * np.array([5.0, 2.0, 1.0, 0.5, 0.1])

        projected = pca_projection(matrix)

        assert projected.shape == (200, 2)
        assert projected[:, 0].var() >= projected[:, 1].var()
        assert abs(projected[:, 0].mean()) < 1e-9

    def test_too_small(self):
        """Test a single row cannot be projected."""
        with pytest.raises(InvalidArgumentError):
            pca_projection(np.zeros((1, 4)))
