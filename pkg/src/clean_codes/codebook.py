"""
Learned codebook of clean-speech representation prototypes.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.cluster import kmeans_plusplus

from .errors import InvalidArgumentError, InvalidStateError

logger = logging.getLogger(__name__)


@dataclass
class CodeSequence:
    ids: torch.Tensor
    num_entries: int

    def __post_init__(self):
        if self.ids.numel() and (int(self.ids.min()) < 0 or int(self.ids.max()) >= self.num_entries):
            raise InvalidArgumentError(f"Code ids outside [0, {self.num_entries})")

    def __len__(self) -> int:
        return self.ids.shape[-1]


@dataclass
class QuantizedRepr:
    values: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in ("nn_lookup", "predicted"):
            raise InvalidArgumentError(f"Unknown quantized source: {self.source}")


class Codebook(nn.Module):
    """N x D matrix of code vectors with usage tracking for dead-code reseeding."""

    def __init__(self, num_entries: int, dim: int, dead_code_epochs: int = 2):
        super().__init__()
        if num_entries < 2 or dim < 1:
            raise InvalidArgumentError(f"Codebook needs N >= 2 and D >= 1, got {num_entries}x{dim}")
        self.num_entries = num_entries
        self.dim = dim
        self.dead_code_epochs = dead_code_epochs
        self.entries = nn.Parameter(torch.randn(num_entries, dim) * 0.1)
        self.register_buffer("usage", torch.zeros(num_entries, dtype=torch.long))
        self.register_buffer("idle_epochs", torch.zeros(num_entries, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def frozen(self) -> bool:
        return not self.entries.requires_grad

    def freeze(self) -> "Codebook":
        self.entries.requires_grad_(False)
        return self

    def unfreeze(self) -> "Codebook":
        self.entries.requires_grad_(True)
        return self

    @torch.no_grad()
    def init_from(self, frames: torch.Tensor, seed: int = 0) -> None:
        """Seed the entries with k-means++ over (T, D) clean frames."""
        data = frames.detach().reshape(-1, self.dim).double().cpu().numpy()
        if data.shape[0] == 0:
            raise InvalidArgumentError("Cannot initialise a codebook from zero frames")
        rng = np.random.default_rng(seed)
        if data.shape[0] >= self.num_entries:
            centers, _ = kmeans_plusplus(data, self.num_entries, random_state=int(seed))
        else:
            picks = rng.integers(0, data.shape[0], size=self.num_entries)
            centers = data[picks] + 1e-3 * rng.standard_normal((self.num_entries, self.dim))
            logger.warning(f"Only {data.shape[0]} frames for {self.num_entries} codes, seeding with jitter")
        self.entries.data.copy_(torch.from_numpy(centers).to(self.entries.dtype))
        self.initialized.fill_(True)

    def nn_lookup(self, z: torch.Tensor) -> CodeSequence:
        """Nearest entry per frame; ties go to the lowest index."""
        if z.shape[-1] != self.dim:
            raise InvalidArgumentError(f"Frame dim {z.shape[-1]} does not match codebook dim {self.dim}")
        flat = z.reshape(-1, self.dim)
        distances = torch.cdist(flat, self.entries.to(flat.dtype), compute_mode="donot_use_mm_for_euclid_dist")
        ids = distances.argmin(dim=-1).view(z.shape[:-1])
        if self.training and not self.frozen:
            self.usage.add_(torch.bincount(ids.flatten().cpu(), minlength=self.num_entries).to(self.usage.device))
        return CodeSequence(ids=ids, num_entries=self.num_entries)

    def quantize(self, codes: CodeSequence, source: str = "nn_lookup") -> QuantizedRepr:
        return QuantizedRepr(values=F.embedding(codes.ids, self.entries), source=source)

    @torch.no_grad()
    def end_epoch(self, frames: Optional[torch.Tensor] = None, seed: int = 0) -> int:
        """Reseed codes idle for ``dead_code_epochs`` epochs from random frames."""
        idle = self.usage == 0
        self.idle_epochs[idle] += 1
        self.idle_epochs[~idle] = 0
        self.usage.zero_()
        dead = (self.idle_epochs >= self.dead_code_epochs).nonzero().flatten()
        if len(dead) == 0 or frames is None or self.frozen:
            return 0
        flat = frames.detach().reshape(-1, self.dim)
        generator = torch.Generator().manual_seed(seed)
        picks = torch.randint(0, flat.shape[0], (len(dead),), generator=generator)
        self.entries.data[dead] = flat[picks].to(self.entries.dtype)
        self.idle_epochs[dead] = 0
        logger.info(f"Reseeded {len(dead)} dead codebook entries")
        return len(dead)

    def perplexity(self, codes: CodeSequence) -> float:
        counts = torch.bincount(codes.ids.flatten().cpu(), minlength=self.num_entries).double()
        probs = counts / counts.sum().clamp(min=1)
        return float(torch.exp(-torch.special.xlogy(probs, probs).sum()))


def codebook_pretrain_loss(z_c: torch.Tensor, z_q: torch.Tensor, beta_commit: float = 0.25) -> torch.Tensor:
    """Codebook term pulls entries to frames; commitment term pulls frames to entries."""
    if z_c.shape != z_q.shape:
        raise InvalidArgumentError(f"Shape mismatch: {tuple(z_c.shape)} vs {tuple(z_q.shape)}")
    return F.mse_loss(z_q, z_c.detach()) + beta_commit * F.mse_loss(z_c, z_q.detach())


def codebook_quantize_loss(codebook: Codebook, z_c: torch.Tensor, beta_commit: float = 0.25):
    """Quantize clean frames and return (loss, codes)."""
    if codebook.frozen:
        raise InvalidStateError("Codebook is frozen; pretraining would not update it")
    codes = codebook.nn_lookup(z_c.detach())
    z_q = codebook.quantize(codes).values
    return codebook_pretrain_loss(z_c, z_q, beta_commit), codes
