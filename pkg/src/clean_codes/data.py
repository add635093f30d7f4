"""
Paired (noisy, clean) datasets and length-bucketed batching.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch

from .corpus import Manifest, NoisyPair, load_pairs
from .errors import InvalidArgumentError
from .vocab import Vocab

logger = logging.getLogger(__name__)


@dataclass
class PairedItem:
    id: str
    noisy: np.ndarray
    clean: np.ndarray
    transcript: str
    noise_type: str
    snr_db: float

    def __post_init__(self):
        if len(self.noisy) != len(self.clean):
            raise InvalidArgumentError(f"{self.id}: noisy and clean lengths differ")

    def __len__(self) -> int:
        return len(self.noisy)


@dataclass
class Batch:
    ids: List[str]
    noisy: torch.Tensor
    clean: torch.Tensor
    lengths: torch.Tensor
    transcripts: List[str]
    targets: List[List[int]]
    noise_types: List[str]
    snr_db: List[float]

    def __len__(self) -> int:
        return len(self.ids)

    def to(self, dtype: torch.dtype) -> "Batch":
        self.noisy = self.noisy.to(dtype)
        self.clean = self.clean.to(dtype)
        return self


def collate(items: Sequence[PairedItem], vocab: Optional[Vocab] = None,
            dtype: torch.dtype = torch.float32) -> Batch:
    """Zero-pad to the longest item; ``lengths`` marks the valid samples."""
    if not items:
        raise InvalidArgumentError("Cannot collate an empty batch")
    vocab = vocab or Vocab()
    max_len = max(len(item) for item in items)
    noisy = torch.zeros(len(items), max_len, dtype=dtype)
    clean = torch.zeros(len(items), max_len, dtype=dtype)
    for i, item in enumerate(items):
        noisy[i, :len(item)] = torch.as_tensor(item.noisy, dtype=dtype)
        clean[i, :len(item)] = torch.as_tensor(item.clean, dtype=dtype)
    return Batch(
        ids=[item.id for item in items],
        noisy=noisy,
        clean=clean,
        lengths=torch.tensor([len(item) for item in items], dtype=torch.long),
        transcripts=[item.transcript for item in items],
        targets=[vocab.encode(item.transcript) for item in items],
        noise_types=[item.noise_type for item in items],
        snr_db=[float(item.snr_db) for item in items],
    )


class PairedDataset:
    """In-memory list of paired utterances."""

    def __init__(self, items: Sequence[PairedItem], vocab: Optional[Vocab] = None):
        if not items:
            raise InvalidArgumentError("Dataset is empty")
        self.items = list(items)
        self.vocab = vocab or Vocab()
        self.logger = logging.getLogger(__name__)

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: str, vocab: Optional[Vocab] = None) -> "PairedDataset":
        items = [
            PairedItem(id=entry.id, noisy=noisy, clean=clean, transcript=entry.transcript,
                       noise_type=entry.noise_type, snr_db=entry.snr_db)
            for entry, noisy, clean in load_pairs(manifest, split)
        ]
        if not items:
            raise InvalidArgumentError(f"Split {split!r} has no entries")
        return cls(items, vocab)

    @classmethod
    def from_pairs(cls, pairs: Sequence[NoisyPair], noise_type: str = "unknown") -> "PairedDataset":
        return cls([
            PairedItem(id=pair.clean.id, noisy=pair.noisy_samples, clean=pair.clean.samples,
                       transcript=pair.clean.transcript, noise_type=noise_type, snr_db=pair.snr_db)
            for pair in pairs
        ])

    def __len__(self) -> int:
        return len(self.items)

    def bucketed_batches(self, batch_size: int, seed: Optional[int] = None) -> List[List[int]]:
        """
        Sort by length, cut into batches, and shuffle the batch order.

        Args:
            batch_size: Items per batch
            seed: Shuffle seed; ``None`` keeps the sorted order

        Returns:
            List of index lists
        """
        if batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
        order = sorted(range(len(self.items)), key=lambda i: (len(self.items[i]), self.items[i].id))
        buckets = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        if seed is not None:
            rng = np.random.default_rng(seed)
            buckets = [buckets[i] for i in rng.permutation(len(buckets))]
        return buckets

    def batch(self, indices: Sequence[int], dtype: torch.dtype = torch.float32) -> Batch:
        return collate([self.items[i] for i in indices], self.vocab, dtype)

    def iterate(self, batch_size: int, seed: Optional[int] = None,
                dtype: torch.dtype = torch.float32) -> Iterator[Batch]:
        for indices in self.bucketed_batches(batch_size, seed):
            yield self.batch(indices, dtype)

    def batch_for_step(self, step: int, batch_size: int, seed: int,
                       dtype: torch.dtype = torch.float32) -> Batch:
        """Batch at a global step: epochs reshuffle with ``seed + epoch``."""
        epoch, position = divmod(step, self.steps_per_epoch(batch_size))
        return self.batch(self.bucketed_batches(batch_size, seed + epoch)[position], dtype)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.items) // batch_size)
