"""
Noise-robust wav2vec2-style backbone.

A strided convolutional feature encoder turns waveforms into frame features,
a Transformer context network contextualizes (partially masked) noisy features,
and a product-quantized gumbel VQ turns clean features into contrastive targets.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Any, Dict, FrozenSet, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass
class EncoderConfig:
    conv_channels: Tuple[int, ...] = (64, 64, 64, 64)
    strides: Tuple[int, ...] = (5, 4, 2, 2)
    kernels: Tuple[int, ...] = (10, 8, 4, 4)
    transformer_layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    use_positions: bool = True
    mask_prob: float = 0.065
    mask_span: int = 10
    num_distractors: int = 20
    logit_temp: float = 0.1
    vq_groups: int = 2
    vq_entries: int = 64
    vq_temperature: Tuple[float, float, float] = (2.0, 0.5, 0.999)
    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 1.0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.vq_temperature = tuple(float(t) for t in self.vq_temperature)
        if not (len(self.strides) == len(self.kernels) == len(self.conv_channels)):
            raise InvalidArgumentError(
                "conv_channels, strides and kernels must have one entry per conv layer"
            )
        if self.embed_dim % self.heads != 0:
            raise InvalidArgumentError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % self.vq_groups != 0:
            raise InvalidArgumentError(f"embed_dim {self.embed_dim} not divisible by vq_groups {self.vq_groups}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(
            conv_channels=(512,) * 7,
            strides=(5, 2, 2, 2, 2, 2, 2),
            kernels=(10, 3, 3, 3, 3, 2, 2),
            transformer_layers=12,
            embed_dim=768,
            heads=12,
            ffn_dim=2048,
            num_distractors=100,
            vq_entries=320,
        )

    @property
    def frame_shift_ms(self) -> float:
        return 1000.0 * float(np.prod(self.strides)) / 16000.0


def frame_count(length: int, config: EncoderConfig) -> int:
    """Output frames of the conv stack for ``length`` input samples."""
    for kernel, stride in zip(config.kernels, config.strides):
        length = (length - kernel) // stride + 1
    return length


def receptive_field(config: EncoderConfig) -> int:
    """Smallest input length producing one output frame."""
    length = 1
    for kernel, stride in reversed(list(zip(config.kernels, config.strides))):
        length = (length - 1) * stride + kernel
    return length


def frame_lengths(lengths: torch.Tensor, config: EncoderConfig) -> torch.Tensor:
    out = lengths.clone()
    for kernel, stride in zip(config.kernels, config.strides):
        out = torch.div(out - kernel, stride, rounding_mode="floor") + 1
    return out


def padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """Boolean (B, T) mask that is True on padded frames."""
    return torch.arange(max_len, device=lengths.device).unsqueeze(0) >= lengths.unsqueeze(1)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64, device=device).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term[: dim // 2])
    return table.to(dtype)


@dataclass
class WaveFeatures:
    values: torch.Tensor
    frame_shift_ms: float
    lengths: torch.Tensor
    activations: Optional[torch.Tensor] = None

    @property
    def padding_mask(self) -> torch.Tensor:
        return padding_mask(self.lengths, self.values.shape[1])


@dataclass
class ContextRepr:
    values: torch.Tensor
    lengths: torch.Tensor

    @property
    def padding_mask(self) -> torch.Tensor:
        return padding_mask(self.lengths, self.values.shape[1])


@dataclass
class MaskPlan:
    start_prob: float
    span_len: int
    length: int
    masked_index_set: FrozenSet[int] = field(default_factory=frozenset)

    def to_tensor(self, max_len: Optional[int] = None) -> torch.Tensor:
        mask = torch.zeros(max_len or self.length, dtype=torch.bool)
        if self.masked_index_set:
            mask[sorted(self.masked_index_set)] = True
        return mask

    @property
    def fraction(self) -> float:
        return len(self.masked_index_set) / self.length


@dataclass
class QuantizedTargets:
    values: torch.Tensor
    frame_index_map: torch.Tensor
    soft_probs: Optional[torch.Tensor] = None
    code_perplexity: Optional[torch.Tensor] = None


def sample_mask(T: int, p: float, span_len: int, seed: int, min_spans: int = 0) -> MaskPlan:
    """
    Sample span starts independently with probability ``p`` and mask
    ``span_len`` frames from each start, clipped to the sequence.
    """
    if T < 1:
        raise InvalidArgumentError("Cannot mask an empty sequence")
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"Mask start probability must be in (0, 1), got {p}")
    if span_len < 1:
        raise InvalidArgumentError(f"span_len must be >= 1, got {span_len}")
    rng = np.random.default_rng(seed)
    starts = np.nonzero(rng.random(T) < p)[0]
    if len(starts) < min_spans:
        room = max(1, T - span_len + 1)
        extra = rng.choice(room, size=min(min_spans, room), replace=False)
        starts = np.union1d(starts, extra)
    masked = set()
    for start in starts:
        masked.update(range(int(start), min(T, int(start) + span_len)))
    return MaskPlan(start_prob=p, span_len=span_len, length=T, masked_index_set=frozenset(masked))


def gumbel_softmax_sample(logits: torch.Tensor, tau: float, hard: bool,
                          generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Relaxed categorical sample softmax(log p / tau + g), straight-through when hard.

    Scaling only the log-probabilities by the temperature makes the selection
    converge to argmax as ``tau`` goes to zero, and it is the plain
    gumbel-softmax at ``tau`` = 1.
    """
    if tau <= 0:
        raise InvalidArgumentError(f"Gumbel temperature must be > 0, got {tau}")
    uniform = torch.rand(logits.shape, generator=generator, dtype=logits.dtype).to(logits.device)
    gumbels = -torch.log(-torch.log(uniform.clamp(1e-20, 1.0 - 1e-7)))
    log_probs = F.log_softmax(logits, dim=-1)
    y_soft = F.softmax(log_probs / tau + gumbels, dim=-1)
    if not hard:
        return y_soft
    index = y_soft.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y_soft).scatter_(-1, index, 1.0)
    return (y_hard - y_soft).detach() + y_soft


class FeatureEncoder(nn.Module):
    """Strided 1-D conv stack + per-frame layer norm + projection to D."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        in_channels = 1
        for channels, kernel, stride in zip(config.conv_channels, config.kernels, config.strides):
            layers.append(nn.Conv1d(in_channels, channels, kernel, stride=stride, bias=False))
            layers.append(nn.GELU())
            in_channels = channels
        self.conv_layers = nn.Sequential(*layers)
        self.layer_norm = nn.LayerNorm(in_channels)
        self.proj = nn.Linear(in_channels, config.embed_dim)

    def forward(self, waveform: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> WaveFeatures:
        if waveform.dim() == 1:
            waveform = waveform.unsqueeze(0)
        if lengths is None:
            lengths = torch.full((waveform.shape[0],), waveform.shape[1], dtype=torch.long)
        needed = receptive_field(self.config)
        if waveform.shape[1] < needed or int(lengths.min()) < needed:
            raise InvalidArgumentError(
                f"Waveform of {int(lengths.min())} samples is shorter than the receptive field ({needed})"
            )
        activations = self.conv_layers(waveform.unsqueeze(1)).transpose(1, 2)
        values = self.proj(self.layer_norm(activations))
        return WaveFeatures(
            values=values,
            frame_shift_ms=self.config.frame_shift_ms,
            lengths=frame_lengths(lengths, self.config),
            activations=activations,
        )


class ContextNetwork(nn.Module):
    """Transformer over frame features with a shared learnable mask embedding."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.mask_embedding = nn.Parameter(torch.empty(config.embed_dim).uniform_())
        layer = nn.TransformerEncoderLayer(
            d_model=config.embed_dim,
            nhead=config.heads,
            dim_feedforward=config.ffn_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, config.transformer_layers, enable_nested_tensor=False)

    def replace_masked(self, values: torch.Tensor, time_mask: Optional[torch.Tensor]) -> torch.Tensor:
        if time_mask is None or not bool(time_mask.any()):
            return values
        embedding = self.mask_embedding.to(values.dtype).expand_as(values)
        return torch.where(time_mask.unsqueeze(-1), embedding, values)

    def forward(self, values: torch.Tensor, time_mask: Optional[torch.Tensor] = None,
                pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.replace_masked(values, time_mask)
        if self.config.use_positions:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype, device=x.device)
        if pad_mask is not None and not bool(pad_mask.any()):
            pad_mask = None
        return self.transformer(x, src_key_padding_mask=pad_mask)


@dataclass
class QuantizerOutput:
    quantized: torch.Tensor
    soft_probs: torch.Tensor
    code_perplexity: torch.Tensor
    ids: torch.Tensor


class GumbelVectorQuantizer(nn.Module):
    """Product quantizer: G groups of V entries, concatenated to D dims."""

    def __init__(self, input_dim: int, groups: int, entries: int,
                 temperature: Tuple[float, float, float] = (2.0, 0.5, 0.999)):
        super().__init__()
        if input_dim % groups != 0:
            raise InvalidArgumentError(f"input_dim {input_dim} not divisible by groups {groups}")
        self.groups = groups
        self.entries = entries
        self.max_temp, self.min_temp, self.temp_decay = temperature
        self.weight_proj = nn.Linear(input_dim, groups * entries)
        nn.init.normal_(self.weight_proj.weight, mean=0.0, std=1.0)
        nn.init.zeros_(self.weight_proj.bias)
        self.codevectors = nn.Parameter(torch.empty(1, groups * entries, input_dim // groups).uniform_())
        self.register_buffer("num_updates", torch.zeros((), dtype=torch.long))

    def current_temperature(self) -> float:
        temp = self.max_temp * self.temp_decay ** int(self.num_updates)
        return max(temp, self.min_temp)

    def forward(self, x: torch.Tensor, temperature: Optional[float] = None,
                generator: Optional[torch.Generator] = None) -> QuantizerOutput:
        n = x.shape[0]
        logits = self.weight_proj(x).view(n * self.groups, self.entries)

        hard_ids = logits.argmax(dim=-1)
        hard_probs = F.one_hot(hard_ids, self.entries).to(x.dtype).view(n, self.groups, -1).mean(dim=0)
        code_perplexity = torch.exp(-torch.special.xlogy(hard_probs, hard_probs).sum(-1)).sum()
        soft_probs = F.softmax(logits.view(n, self.groups, -1), dim=-1).mean(dim=0)

        if self.training:
            tau = temperature if temperature is not None else self.current_temperature()
            one_hot = gumbel_softmax_sample(logits, tau, hard=True, generator=generator)
            self.num_updates.add_(1)
        else:
            one_hot = F.one_hot(hard_ids, self.entries).to(x.dtype)
        ids = one_hot.argmax(dim=-1).view(n, self.groups)

        one_hot = one_hot.view(n, self.groups * self.entries)
        quantized = one_hot.unsqueeze(-1) * self.codevectors
        quantized = quantized.view(n, self.groups, self.entries, -1).sum(-2).view(n, -1)
        return QuantizerOutput(quantized=quantized, soft_probs=soft_probs,
                               code_perplexity=code_perplexity, ids=ids)


class EW2Backbone(nn.Module):
    """Feature encoder, context network and VQ target module."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.feature_encoder = FeatureEncoder(config)
        self.context = ContextNetwork(config)
        self.quantizer = GumbelVectorQuantizer(config.embed_dim, config.vq_groups,
                                               config.vq_entries, config.vq_temperature)

    def encode_features(self, waveform: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> WaveFeatures:
        return self.feature_encoder(waveform, lengths)

    def contextualize(self, features: WaveFeatures,
                      mask: Optional[Union[MaskPlan, torch.Tensor]] = None) -> ContextRepr:
        values = features.values
        time_mask = _as_time_mask(mask, values.shape[0], values.shape[1])
        if time_mask is not None and time_mask.shape != values.shape[:2]:
            raise InvalidArgumentError(f"Mask shape {tuple(time_mask.shape)} does not match features")
        out = self.context(values, time_mask, features.padding_mask)
        return ContextRepr(values=out, lengths=features.lengths)

    def represent(self, waveform: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> ContextRepr:
        """Unmasked contextual representation of a waveform batch."""
        return self.contextualize(self.encode_features(waveform, lengths))

    def quantize_targets(self, clean_features: WaveFeatures,
                         mask: Optional[Union[MaskPlan, torch.Tensor]],
                         generator: Optional[torch.Generator] = None) -> QuantizedTargets:
        values = clean_features.values
        time_mask = _as_time_mask(mask, values.shape[0], values.shape[1])
        if time_mask is None or not bool(time_mask.any()):
            return QuantizedTargets(values=values.new_zeros(0, values.shape[-1]),
                                    frame_index_map=torch.zeros(0, 2, dtype=torch.long))
        frame_index_map = time_mask.nonzero()
        output = self.quantizer(values[time_mask], generator=generator)
        return QuantizedTargets(values=output.quantized, frame_index_map=frame_index_map,
                                soft_probs=output.soft_probs, code_perplexity=output.code_perplexity)


def _as_time_mask(mask, batch: int, length: int) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    if isinstance(mask, MaskPlan):
        if any(i >= length for i in mask.masked_index_set):
            raise InvalidArgumentError("Mask index beyond sequence length")
        return mask.to_tensor(length).unsqueeze(0).expand(batch, length)
    if mask.dim() == 1:
        mask = mask.unsqueeze(0).expand(batch, -1)
    return mask.bool()


def contrastive_loss(z_masked: torch.Tensor, targets: Union[QuantizedTargets, torch.Tensor],
                     K: int, kappa: float, seed: Union[int, torch.Generator, None] = None) -> torch.Tensor:
    """
    Mean cross-entropy of picking the true quantized target among K distractors.

    Distractors are drawn without replacement from the other masked frames.
    """
    target_values = targets.values if isinstance(targets, QuantizedTargets) else targets
    n = z_masked.shape[0]
    if target_values.shape != z_masked.shape:
        raise InvalidArgumentError("Masked representations and targets differ in shape")
    if n - 1 < K:
        raise InvalidArgumentError(f"Need at least {K} distractor frames, have {n - 1}")

    generator = seed if isinstance(seed, torch.Generator) else None
    if isinstance(seed, int):
        generator = torch.Generator().manual_seed(seed)
    scores = torch.rand(n, n, generator=generator)
    scores.fill_diagonal_(2.0)
    distractor_idx = scores.argsort(dim=1)[:, :K].to(target_values.device)

    candidates = torch.cat([target_values.unsqueeze(1), target_values[distractor_idx]], dim=1)
    logits = F.cosine_similarity(z_masked.unsqueeze(1), candidates, dim=-1, eps=COSINE_EPS) / kappa
    positives = torch.zeros(n, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, positives)


def diversity_loss(soft_probs: torch.Tensor) -> torch.Tensor:
    """(GV - sum_g exp(H(p_g))) / GV over batch-averaged group distributions."""
    groups, entries = soft_probs.shape
    entropy = -torch.special.xlogy(soft_probs, soft_probs).sum(dim=-1)
    total = groups * entries
    return (total - torch.exp(entropy).sum()) / total


def feature_penalty(features: torch.Tensor) -> torch.Tensor:
    return features.pow(2).mean()


def consistency_loss(F_n: torch.Tensor, F_c: torch.Tensor,
                     frame_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over frames of the squared L2 distance between noisy and clean features."""
    if F_n.shape != F_c.shape:
        raise InvalidArgumentError(f"Shape mismatch: {tuple(F_n.shape)} vs {tuple(F_c.shape)}")
    per_frame = (F_n - F_c).pow(2).sum(dim=-1)
    if frame_mask is not None:
        return per_frame[frame_mask].mean()
    return per_frame.mean()


def ew2_loss(L_m, L_d, L_f, L_c, alpha: float = 0.1, beta_w: float = 10.0, gamma: float = 1.0):
    return L_m + alpha * L_d + beta_w * L_f + gamma * L_c
