"""
Configuration management for Clean Codes.
"""

import copy
import logging
import os
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

from .errors import InvalidArgumentError

DEFAULT_CONFIG_PATH = "clean-codes-config.yaml"
OUTPUT_ROOT_ENV = "CLEAN_CODES_OUTPUT_ROOT"

STATIONARY_NOISE_TYPES = ["traffic", "metro", "car"]
NON_STATIONARY_NOISE_TYPES = ["babble", "airport_station", "ac_vacuum", "cafe"]


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``override`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_dotted(config: Dict[str, Any], dotted_key: str, value: Any) -> None:
    """Set ``a.b.c`` inside a nested dict, creating sections as needed."""
    parts = dotted_key.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise InvalidArgumentError(f"Cannot set {dotted_key}: {part} is not a section")
    node[parts[-1]] = value


def get_dotted(config: Dict[str, Any], dotted_key: str, default: Any = None) -> Any:
    node: Any = config
    for part in dotted_key.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


class CleanCodesConfig:
    """Configuration manager for Clean Codes."""

    def __init__(self, config_path: Optional[str] = DEFAULT_CONFIG_PATH,
                 overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize configuration from a YAML (or JSON) file.

        Args:
            config_path: Path to the configuration file; ``None`` uses defaults only
            overrides: Optional nested dict merged over the loaded file
        """
        self.config_path = config_path

        # Load .env file if it exists
        self._load_env_file()

        self.overrides = copy.deepcopy(overrides or {})
        self.config = deep_merge(self._load_config(), self.overrides)
        self._setup_logging()

    def _load_env_file(self):
        """Load environment variables from .env file."""
        env_paths = ['.env']
        if self.config_path:
            env_paths.append(os.path.join(os.path.dirname(self.config_path), '.env'))

        for env_path in env_paths:
            if os.path.exists(env_path):
                load_dotenv(env_path)
                logging.getLogger(__name__).debug(f"Loaded environment variables from {env_path}")
                break

    def _get_env_var(self, key: str, default: str = '') -> str:
        return os.getenv(key, default)

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file, merged over the defaults."""
        defaults = self._get_default_config()
        if not self.config_path:
            return defaults
        if not os.path.exists(self.config_path):
            print(f"⚠️  Configuration file not found at {self.config_path}, using defaults")
            return defaults
        try:
            with open(self.config_path, 'r') as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise InvalidArgumentError(f"Could not parse configuration {self.config_path}: {e}") from e
        print(f"✅ Loaded configuration from {self.config_path}")
        return deep_merge(defaults, loaded or {})

    def _get_default_config(self) -> Dict[str, Any]:
        """Get default (desk-scale) configuration."""
        return {
            'corpus': {
                'seed': 1234,
                'sample_rate': 16000,
                'token_alphabet': 'abcdefghijkl',
                'tokens_per_utterance': [4, 8],
                'token_duration_s': 0.08,
                'word_break_prob': 0.25,
                'splits': {'train': 200, 'valid': 20, 'test': 70},
                'train_snrs': [0, 5, 10, 15, 20, 25],
                'test_snrs': [0, 5, 10, 15, 20],
                'noise_types': STATIONARY_NOISE_TYPES + NON_STATIONARY_NOISE_TYPES,
                'noise_duration_s': 4.0,
                'workers': 1,
            },
            'backbone': {
                'conv_channels': [64, 64, 64, 64],
                'strides': [5, 4, 2, 2],
                'kernels': [10, 8, 4, 4],
                'transformer_layers': 2,
                'embed_dim': 64,
                'heads': 4,
                'ffn_dim': 128,
                'use_positions': True,
                'mask_prob': 0.065,
                'mask_span': 10,
                'num_distractors': 20,
                'logit_temp': 0.1,
                'vq_groups': 2,
                'vq_entries': 64,
                'vq_temperature': [2.0, 0.5, 0.999],
                'alpha': 0.1,
                'beta': 10.0,
                'gamma': 1.0,
            },
            'codebook': {
                'enabled': True,
                'num_entries': 64,
                'beta_commit': 0.25,
                'pretrained': True,
                'frozen': True,
                'dead_code_epochs': 2,
            },
            'predictor': {
                'kind': 'transformer',
                'blocks': 2,
                'proj_dim': 32,
                'heads': 4,
                'ffn_dim': None,
                'tau': 1.0,
                'hard_select': True,
                'cache_targets': True,
                'lambda_pred': 0.1,
                'lambda_res': 0.1,
            },
            'iffnet': {
                'repeats': 4,
                'bottleneck_dim': None,
                'resnet_kernel': 3,
                'resnet_layers': 4,
                'share_interaction_mask': False,
            },
            'fusion': {
                'kind': 'iffnet',
            },
            'train': {
                'seed': 0,
                'batch_size': 8,
                'log_every': 50,
                'adam_betas': [0.9, 0.98],
                'adam_eps': 1e-6,
                'freeze_encoder': False,
                'allow_random_codebook': False,
                'allow_random_backbone': False,
                'pretrain_backbone': {'steps': 2000, 'peak_lr': 5e-4, 'warmup_frac': 0.2},
                'pretrain_codebook': {'steps': 1000, 'peak_lr': 5e-4, 'warmup_frac': 0.2},
                'finetune': {'steps': 2000, 'peak_lr': 5e-4, 'warmup_frac': 0.2},
                'augment': {
                    'time_mask_prob': 0.065,
                    'time_span': 10,
                    'freq_mask_prob': 0.05,
                    'freq_span': 8,
                },
            },
            'eval': {
                'split': 'test',
                'batch_size': 16,
            },
            'logging': {
                'level': 'INFO',
                'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            },
            'version': '0.1.0'
        }

    def _setup_logging(self):
        """Setup logging based on configuration."""
        log_config = self.config.get('logging', {})
        level = getattr(logging, str(log_config.get('level', 'INFO')).upper(), logging.INFO)
        format_str = log_config.get('format', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        logging.basicConfig(
            level=level,
            format=format_str
        )

    def with_overrides(self, dotted: Dict[str, Any]) -> "CleanCodesConfig":
        """Return a copy with ``{"section.key": value}`` overrides applied."""
        nested: Dict[str, Any] = {}
        for key, value in dotted.items():
            set_dotted(nested, key, value)
        clone = copy.copy(self)
        clone.overrides = deep_merge(self.overrides, nested)
        clone.config = deep_merge(self.config, nested)
        return clone

    def get(self, dotted_key: str, default: Any = None) -> Any:
        return get_dotted(self.config, dotted_key, default)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config)

    def get_corpus_config(self) -> Dict[str, Any]:
        """Get corpus configuration."""
        return self.config.get('corpus', {})

    def get_codebook_config(self) -> Dict[str, Any]:
        """Get codebook configuration."""
        return self.config.get('codebook', {})

    def get_train_config(self) -> Dict[str, Any]:
        """Get training configuration."""
        return self.config.get('train', {})

    def get_eval_config(self) -> Dict[str, Any]:
        """Get evaluation configuration."""
        return self.config.get('eval', {})

    def get_fusion_kind(self) -> str:
        return self.config.get('fusion', {}).get('kind', 'iffnet')

    def get_encoder_config(self):
        """Typed view of the ``backbone`` section."""
        from .backbone import EncoderConfig
        return EncoderConfig.from_dict(self.config.get('backbone', {}))

    def get_predictor_config(self):
        """Typed view of the ``predictor`` section."""
        from .predictor import PredictorConfig
        return PredictorConfig.from_dict(self.config.get('predictor', {}))

    def get_iffnet_config(self):
        """Typed view of the ``iffnet`` section."""
        from .iffnet import IFFConfig
        return IFFConfig.from_dict(self.config.get('iffnet', {}))

    def get_output_root(self) -> str:
        """Output root from the environment, defaulting to ./runs."""
        return self._get_env_var(OUTPUT_ROOT_ENV, 'runs')

    def reload(self):
        """Reload configuration from file, keeping the overrides applied so far."""
        self.config = deep_merge(self._load_config(), self.overrides)
        self._setup_logging()
        print("✅ Configuration reloaded")
