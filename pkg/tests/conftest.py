"""
Shared fixtures: a tiny configuration and a tiny on-disk corpus.
"""

import pytest

from clean_codes.config import CleanCodesConfig
from clean_codes.corpus import Manifest, build_manifest
from clean_codes.data import PairedDataset

TINY_OVERRIDES = {
    'corpus': {
        'seed': 7,
        'token_alphabet': 'abcdef',
        'tokens_per_utterance': [3, 5],
        'splits': {'train': 8, 'valid': 2, 'test': 7},
        'test_snrs': [0, 10],
        'noise_duration_s': 1.0,
    },
    'backbone': {
        'conv_channels': [8, 8, 8, 8],
        'embed_dim': 16,
        'heads': 2,
        'ffn_dim': 32,
        'transformer_layers': 1,
        'num_distractors': 4,
        'vq_entries': 8,
    },
    'codebook': {'num_entries': 8},
    'predictor': {'blocks': 1, 'proj_dim': 8, 'heads': 2},
    'iffnet': {'repeats': 1},
    'train': {
        'batch_size': 4,
        'log_every': 1,
        'pretrain_backbone': {'steps': 3, 'peak_lr': 1e-3, 'warmup_frac': 0.34},
        'pretrain_codebook': {'steps': 3, 'peak_lr': 1e-3, 'warmup_frac': 0.34},
        'finetune': {'steps': 3, 'peak_lr': 1e-3, 'warmup_frac': 0.34},
    },
    'eval': {'batch_size': 4},
}


@pytest.fixture
def tiny_config():
    return CleanCodesConfig(None, overrides=TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("corpus")
    build_manifest(TINY_OVERRIDES['corpus'], out_dir)
    return out_dir


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus_dir):
    return Manifest.load(tiny_corpus_dir)


@pytest.fixture
def train_set(tiny_manifest):
    return PairedDataset.from_manifest(tiny_manifest, "train")


@pytest.fixture
def test_set(tiny_manifest):
    return PairedDataset.from_manifest(tiny_manifest, "test")
