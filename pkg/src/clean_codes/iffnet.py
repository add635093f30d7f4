"""
Interactive feature fusion of noisy and restored representations.

Both branches are compressed by a bottleneck, refined by repeated
ResNet / separable self-attention / interaction stages, decoded back to D
channels and merged through a learned gate.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional, Tuple

import torch
import torch.nn as nn

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

FUSION_KINDS = ("none", "concat", "iffnet")
GATE_LOGIT_LIMIT = 15.0


@dataclass
class IFFConfig:
    bottleneck_dim: Optional[int] = None
    repeats: int = 4
    resnet_kernel: int = 3
    resnet_layers: int = 4
    share_interaction_mask: bool = False

    def __post_init__(self):
        if self.repeats < 1:
            raise InvalidArgumentError(f"repeats must be >= 1, got {self.repeats}")
        if self.resnet_kernel % 2 == 0:
            raise InvalidArgumentError(f"resnet_kernel must be odd for same-padding, got {self.resnet_kernel}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "IFFConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def resolve_bottleneck(self, embed_dim: int) -> int:
        """D' for a given D: configured value, else D/4 below 128 channels, else 128."""
        dim = self.bottleneck_dim
        if dim is None:
            dim = embed_dim // 4 if embed_dim < 128 else 128
        if not 0 < dim < embed_dim:
            raise InvalidArgumentError(f"bottleneck_dim {dim} must be in (0, {embed_dim})")
        return dim


@dataclass
class BranchState:
    noisy: torch.Tensor
    restored: torch.Tensor

    def __post_init__(self):
        if self.noisy.shape != self.restored.shape:
            raise InvalidArgumentError(
                f"Branch shapes differ: {tuple(self.noisy.shape)} vs {tuple(self.restored.shape)}"
            )


@dataclass
class MergeMask:
    values: torch.Tensor


def _conv(x: torch.Tensor, conv: nn.Module) -> torch.Tensor:
    """Apply a Conv1d to (B, T, C) input."""
    return conv(x.transpose(1, 2)).transpose(1, 2)


class Bottleneck(nn.Module):
    """1x1 convolutions compressing D -> D' and recovering D' -> D."""

    def __init__(self, dim: int, bottleneck_dim: int):
        super().__init__()
        self.encoder = nn.Conv1d(dim, bottleneck_dim, kernel_size=1)
        self.decoder = nn.Conv1d(bottleneck_dim, dim, kernel_size=1)

    def identity_init_(self) -> None:
        for conv in (self.encoder, self.decoder):
            if conv.in_channels != conv.out_channels:
                raise InvalidArgumentError("Identity init needs square channels")
            with torch.no_grad():
                conv.weight.copy_(torch.eye(conv.in_channels).unsqueeze(-1))
                conv.bias.zero_()

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        return _conv(z, self.encoder)

    def decode(self, s: torch.Tensor) -> torch.Tensor:
        return _conv(s, self.decoder)


class ResNetBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3, layers: int = 4):
        super().__init__()
        convs = []
        for i in range(layers):
            convs.append(nn.Conv1d(channels, channels, kernel, stride=1, padding=kernel // 2))
            if i < layers - 1:
                convs.append(nn.ReLU())
        self.stack = nn.Sequential(*convs)

    def zero_init_(self) -> None:
        for module in self.stack:
            if isinstance(module, nn.Conv1d):
                nn.init.zeros_(module.weight)
                nn.init.zeros_(module.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + _conv(h, self.stack)


class SeparableSelfAttention(nn.Module):
    """Temporal and embedding-wise self-attention joined by a 1x1 projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv1d(3 * channels, channels, kernel_size=1)

    def attention_maps(self, h: torch.Tensor,
                       pad_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, T, T) temporal and (B, D', D') embedding attention weights."""
        temporal_scores = h @ h.transpose(1, 2) / math.sqrt(self.channels)
        if pad_mask is not None:
            temporal_scores = temporal_scores.masked_fill(pad_mask.unsqueeze(1), float("-inf"))
            valid = (~pad_mask).unsqueeze(-1).to(h.dtype)
            lengths = valid.sum(dim=1, keepdim=True).clamp_min(1.0)
        else:
            valid = torch.ones_like(h[..., :1])
            lengths = torch.full_like(h[:, :1, :1], float(h.shape[1]))
        temporal = torch.softmax(temporal_scores, dim=-1)

        masked = h * valid
        embedding_scores = masked.transpose(1, 2) @ masked / lengths.sqrt()
        embedding = torch.softmax(embedding_scores, dim=-1)
        return temporal, embedding

    def forward(self, h: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        temporal, embedding = self.attention_maps(h, pad_mask)
        h_temp = h + temporal @ h
        h_embd = h + h @ embedding
        return _conv(torch.cat([h, h_temp, h_embd], dim=-1), self.proj)


class Interaction(nn.Module):
    """Each branch gains a sigmoid-gated share of the other."""

    def __init__(self, channels: int, share_mask: bool = False):
        super().__init__()
        self.conv_a = nn.Conv1d(2 * channels, channels, kernel_size=1)
        self.conv_b = self.conv_a if share_mask else nn.Conv1d(2 * channels, channels, kernel_size=1)

    def forward(self, s_n: torch.Tensor, s_q: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if s_n.shape != s_q.shape:
            raise InvalidArgumentError(f"Shape mismatch: {tuple(s_n.shape)} vs {tuple(s_q.shape)}")
        joined = torch.cat([s_n, s_q], dim=-1)
        m_a = torch.sigmoid(_conv(joined, self.conv_a))
        m_b = torch.sigmoid(_conv(joined, self.conv_b))
        return s_n + m_a * s_q, s_q + m_b * s_n


class Merge(nn.Module):
    """Gate M = sigmoid(SelfAttention(Conv(a || b))); Z_f = a*M + b*(1-M)."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv1d(2 * dim, dim, kernel_size=1)
        self.attention = nn.MultiheadAttention(dim, num_heads=1, batch_first=True)

    def zero_init_(self) -> None:
        nn.init.zeros_(self.attention.out_proj.weight)
        nn.init.zeros_(self.attention.out_proj.bias)

    def forward(self, z_ni: torch.Tensor, z_qi: torch.Tensor,
                pad_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, MergeMask]:
        if z_ni.shape != z_qi.shape:
            raise InvalidArgumentError(f"Shape mismatch: {tuple(z_ni.shape)} vs {tuple(z_qi.shape)}")
        x = _conv(torch.cat([z_ni, z_qi], dim=-1), self.conv)
        if pad_mask is not None and not bool(pad_mask.any()):
            pad_mask = None
        attended, _ = self.attention(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        gate = torch.sigmoid(attended.clamp(-GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT))
        fused = z_qi + gate * (z_ni - z_qi)
        fused = torch.maximum(torch.minimum(fused, torch.maximum(z_ni, z_qi)), torch.minimum(z_ni, z_qi))
        return fused, MergeMask(values=gate)


class IFFNet(nn.Module):
    def __init__(self, embed_dim: int, config: IFFConfig):
        super().__init__()
        self.config = config
        self.bottleneck_dim = config.resolve_bottleneck(embed_dim)
        self.noisy_bottleneck = Bottleneck(embed_dim, self.bottleneck_dim)
        self.restored_bottleneck = Bottleneck(embed_dim, self.bottleneck_dim)

        def resnets():
            return nn.ModuleList(
                ResNetBlock(self.bottleneck_dim, config.resnet_kernel, config.resnet_layers)
                for _ in range(config.repeats)
            )

        def attentions():
            return nn.ModuleList(SeparableSelfAttention(self.bottleneck_dim) for _ in range(config.repeats))

        self.noisy_resnets = resnets()
        self.restored_resnets = resnets()
        self.noisy_ssa = attentions()
        self.restored_ssa = attentions()
        self.interactions = nn.ModuleList(
            Interaction(self.bottleneck_dim, config.share_interaction_mask) for _ in range(config.repeats)
        )
        self.merge = Merge(embed_dim)

    def zero_init_(self) -> None:
        for block in list(self.noisy_resnets) + list(self.restored_resnets):
            block.zero_init_()
        self.merge.zero_init_()

    def branches(self, z_n: torch.Tensor, z_q: torch.Tensor,
                 pad_mask: Optional[torch.Tensor] = None) -> BranchState:
        """Decoded (Z_ni, Z_qi) before the merge."""
        state = BranchState(noisy=self.noisy_bottleneck.encode(z_n),
                            restored=self.restored_bottleneck.encode(z_q))
        for i in range(self.config.repeats):
            s_n = self.noisy_ssa[i](self.noisy_resnets[i](state.noisy), pad_mask)
            s_q = self.restored_ssa[i](self.restored_resnets[i](state.restored), pad_mask)
            s_n, s_q = self.interactions[i](s_n, s_q)
            state = BranchState(noisy=s_n, restored=s_q)
        return BranchState(noisy=self.noisy_bottleneck.decode(state.noisy),
                           restored=self.restored_bottleneck.decode(state.restored))

    def fuse(self, z_n: torch.Tensor, z_q: torch.Tensor,
             pad_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, MergeMask]:
        if z_n.shape != z_q.shape:
            raise InvalidArgumentError(f"Shape mismatch: {tuple(z_n.shape)} vs {tuple(z_q.shape)}")
        decoded = self.branches(z_n, z_q, pad_mask)
        return self.merge(decoded.noisy, decoded.restored, pad_mask)

    def forward(self, z_n: torch.Tensor, z_q: torch.Tensor,
                pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.fuse(z_n, z_q, pad_mask)[0]


class ConcatFusion(nn.Module):
    """Concatenate to 2D channels and project back to D."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * embed_dim, embed_dim)

    def forward(self, z_n, z_q, pad_mask=None):
        return self.proj(torch.cat([z_n, z_q], dim=-1))


class NoFusion(nn.Module):
    """Use the restored representation alone."""

    def forward(self, z_n, z_q, pad_mask=None):
        return z_q


def build_fusion(kind: str, embed_dim: int, config: Optional[IFFConfig] = None) -> nn.Module:
    if kind == "iffnet":
        return IFFNet(embed_dim, config or IFFConfig())
    if kind == "concat":
        return ConcatFusion(embed_dim)
    if kind == "none":
        return NoFusion()
    raise InvalidArgumentError(f"Unknown fusion kind {kind!r}, expected one of {FUSION_KINDS}")


def iffnet_forward(z_n: torch.Tensor, z_q: torch.Tensor, net: IFFNet,
                   pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return net(z_n, z_q, pad_mask)
