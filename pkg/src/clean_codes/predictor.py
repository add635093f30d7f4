"""
Code predictor: maps noisy contextual representations to distributions over
codebook entries, selects entries with gumbel-softmax and retrieves them.
"""

import logging
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import gumbel_softmax_sample, padding_mask, sinusoidal_positions
from .codebook import Codebook, CodeSequence, QuantizedRepr
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PREDICTOR_KINDS = ("transformer", "cnn", "nn_matching")


@dataclass
class PredictorConfig:
    kind: str = "transformer"
    blocks: int = 2
    proj_dim: int = 32
    heads: int = 4
    ffn_dim: Optional[int] = None
    tau: float = 1.0
    hard_select: bool = True
    cache_targets: bool = True
    lambda_pred: float = 0.1
    lambda_res: float = 0.1

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise InvalidArgumentError(f"Unknown predictor kind {self.kind!r}, expected one of {PREDICTOR_KINDS}")
        if self.blocks < 1:
            raise InvalidArgumentError(f"Predictor needs at least one block, got {self.blocks}")
        if self.tau <= 0:
            raise InvalidArgumentError(f"Gumbel temperature must be > 0, got {self.tau}")
        if self.proj_dim % self.heads != 0:
            raise InvalidArgumentError(f"proj_dim {self.proj_dim} not divisible by heads {self.heads}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.proj_dim

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "PredictorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def check_dim(self, embed_dim: int) -> None:
        if self.kind == "transformer" and self.proj_dim >= embed_dim:
            raise InvalidArgumentError(f"proj_dim {self.proj_dim} must be smaller than D={embed_dim}")


@dataclass
class CodeLogits:
    logits: torch.Tensor
    probs: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "CodeLogits":
        return cls(logits=logits, probs=F.softmax(logits, dim=-1))

    @classmethod
    def from_probs(cls, probs: torch.Tensor) -> "CodeLogits":
        return cls(logits=torch.log(probs.clamp_min(1e-30)), probs=probs)

    def log_probs(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)


@dataclass
class PredictedCodes:
    ids: torch.Tensor
    one_hot_st: torch.Tensor

    def as_sequence(self) -> CodeSequence:
        return CodeSequence(ids=self.ids, num_entries=self.one_hot_st.shape[-1])


class TransformerCodePredictor(nn.Module):
    """Project to D_p, M post-norm Transformer blocks, linear map to N logits."""

    def __init__(self, embed_dim: int, num_entries: int, config: PredictorConfig):
        super().__init__()
        config.check_dim(embed_dim)
        self.config = config
        self.project = nn.Linear(embed_dim, config.proj_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=config.proj_dim,
            nhead=config.heads,
            dim_feedforward=config.ffn_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=False,
        )
        self.blocks = nn.TransformerEncoder(layer, config.blocks, enable_nested_tensor=False)
        self.output = nn.Linear(config.proj_dim, num_entries)

    def zero_init_output(self) -> None:
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def forward(self, z_n: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.project(z_n)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype, device=x.device)
        if pad_mask is not None and not bool(pad_mask.any()):
            pad_mask = None
        x = self.blocks(x, src_key_padding_mask=pad_mask)
        return self.output(x)


class CNNCodePredictor(nn.Module):
    """Two kernel-3 1-D convolutions."""

    def __init__(self, embed_dim: int, num_entries: int, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.conv1 = nn.Conv1d(embed_dim, config.proj_dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(config.proj_dim, num_entries, kernel_size=3, padding=1)

    def zero_init_output(self) -> None:
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, z_n: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = z_n.transpose(1, 2)
        x = self.conv2(F.gelu(self.conv1(x)))
        return x.transpose(1, 2)


class NNMatchingPredictor(nn.Module):
    """Parameter-free baseline: logits are negative distances to the codebook entries, selected by argmax."""

    def __init__(self, codebook: Codebook):
        super().__init__()
        self.codebook = codebook

    def zero_init_output(self) -> None:
        pass

    def forward(self, z_n: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        entries = self.codebook.entries.to(z_n.dtype)
        flat = z_n.reshape(-1, z_n.shape[-1])
        distances = torch.cdist(flat, entries, compute_mode="donot_use_mm_for_euclid_dist")
        return -distances.view(*z_n.shape[:-1], -1)


def build_predictor(config: PredictorConfig, embed_dim: int, codebook: Codebook) -> nn.Module:
    if config.kind == "transformer":
        return TransformerCodePredictor(embed_dim, codebook.num_entries, config)
    if config.kind == "cnn":
        return CNNCodePredictor(embed_dim, codebook.num_entries, config)
    return NNMatchingPredictor(codebook)


def predict_codes(predictor: nn.Module, z_n: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> CodeLogits:
    """Row-stochastic (B, T, N) code distribution for noisy representations."""
    squeeze = z_n.dim() == 2
    if squeeze:
        z_n = z_n.unsqueeze(0)
    pad_mask = padding_mask(lengths, z_n.shape[1]) if lengths is not None else None
    logits = predictor(z_n, pad_mask)
    if squeeze:
        logits = logits.squeeze(0)
    return CodeLogits.from_logits(logits)


def gumbel_select(logits: torch.Tensor, tau: float, hard_select: bool = True,
                  seed: Optional[int] = None, generator: Optional[torch.Generator] = None) -> PredictedCodes:
    """Differentiable code selection; one-hot forward with soft gradients when hard."""
    if tau <= 0:
        raise InvalidArgumentError(f"Gumbel temperature must be > 0, got {tau}")
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    y = gumbel_softmax_sample(logits, tau, hard=hard_select, generator=generator)
    return PredictedCodes(ids=y.argmax(dim=-1), one_hot_st=y)


def retrieve(codes: PredictedCodes, codebook: Codebook) -> QuantizedRepr:
    """Gathered codebook rows forward, gradient of ``y @ C`` backward."""
    entries = codebook.entries.to(codes.one_hot_st.dtype)
    if codes.ids.numel() and int(codes.ids.max()) >= entries.shape[0]:
        raise InvalidArgumentError("Predicted code id outside the codebook")
    hard = F.embedding(codes.ids, entries)
    soft = codes.one_hot_st @ entries
    return QuantizedRepr(values=hard + (soft - soft.detach()), source="predicted")


def pred_loss(code_logits: CodeLogits, truth: CodeSequence,
              frame_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over frames of -log p(e_t)."""
    log_probs = code_logits.log_probs()
    if log_probs.shape[:-1] != truth.ids.shape:
        raise InvalidArgumentError(
            f"Code logits cover {tuple(log_probs.shape[:-1])} frames but truth has {tuple(truth.ids.shape)}"
        )
    nll = -log_probs.gather(-1, truth.ids.unsqueeze(-1)).squeeze(-1)
    if frame_mask is not None:
        return nll[frame_mask].mean()
    return nll.mean()


def res_loss(z_q: QuantizedRepr, z_c: torch.Tensor, frame_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """MSE between restored and (stop-gradient) clean representations."""
    values = z_q.values if isinstance(z_q, QuantizedRepr) else z_q
    if values.shape != z_c.shape:
        raise InvalidArgumentError(f"Shape mismatch: {tuple(values.shape)} vs {tuple(z_c.shape)}")
    squared = (values - z_c.detach()).pow(2)
    if frame_mask is not None:
        return squared[frame_mask].mean()
    return squared.mean()


def finetune_loss(L_ctc, L_pred, L_res, lambda_pred: float = 0.1, lambda_res: float = 0.1):
    return L_ctc + lambda_pred * L_pred + lambda_res * L_res
