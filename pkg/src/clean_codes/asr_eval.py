"""
CTC loss, greedy decoding, WER and code-accuracy metrics.
"""

import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import jiwer
import torch
import torch.nn.functional as F

from .codebook import CodeSequence
from .config import NON_STATIONARY_NOISE_TYPES, STATIONARY_NOISE_TYPES
from .errors import InfeasibleTargetError, InvalidArgumentError
from .vocab import Vocab, collapse

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["noise_type", "snr_db", "wer", "code_acc", "n_utts"]


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per symbol plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: torch.Tensor, target: Sequence[int], blank_id: int = 0) -> torch.Tensor:
    """Negative log-likelihood of ``target`` summed over all alignments of a (T, V) matrix."""
    T = log_probs.shape[0]
    target = [int(t) for t in target]
    if ctc_min_frames(target) > T:
        raise InfeasibleTargetError(
            f"Target of {len(target)} symbols needs {ctc_min_frames(target)} frames, only {T} available"
        )
    targets = torch.tensor(target, dtype=torch.long)
    return F.ctc_loss(
        log_probs.unsqueeze(1),
        targets,
        input_lengths=torch.tensor([T], dtype=torch.long),
        target_lengths=torch.tensor([len(target)], dtype=torch.long),
        blank=blank_id,
        reduction="sum",
    )


def batch_ctc_loss(log_probs: torch.Tensor, lengths: torch.Tensor,
                   targets: Sequence[Sequence[int]], blank_id: int = 0) -> torch.Tensor:
    """
    Mean per-utterance CTC loss over a (B, T, V) batch.

    Infeasible utterances contribute zero and are counted in the log.
    """
    infeasible = sum(1 for t, n in zip(targets, lengths.tolist()) if ctc_min_frames(list(t)) > n)
    if infeasible:
        logger.warning(f"{infeasible} of {len(targets)} utterances have infeasible CTC targets")
    flat = torch.tensor([int(s) for t in targets for s in t], dtype=torch.long)
    target_lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    losses = F.ctc_loss(
        log_probs.transpose(0, 1),
        flat,
        input_lengths=lengths.cpu().long(),
        target_lengths=target_lengths,
        blank=blank_id,
        reduction="none",
        zero_infinity=True,
    )
    return losses.mean()


@dataclass
class Hypothesis:
    text: str
    frame_ids: List[int]


def greedy_decode(log_probs: torch.Tensor, vocab: Optional[Vocab] = None) -> Hypothesis:
    """Per-frame argmax, merge repeats, drop blanks."""
    vocab = vocab or Vocab()
    frame_ids = [int(i) for i in log_probs.argmax(dim=-1).tolist()]
    return Hypothesis(text=vocab.decode(collapse(frame_ids, vocab.blank_id)), frame_ids=frame_ids)


def _as_words(value: Union[str, Sequence[str]]) -> List[str]:
    if isinstance(value, str):
        return value.split()
    return [str(w) for w in value]


def wer(ref: Union[str, Sequence[str]], hyp: Union[str, Sequence[str]]) -> float:
    """Word-level Levenshtein distance divided by the reference length."""
    ref_words = _as_words(ref)
    hyp_words = _as_words(hyp)
    if not ref_words:
        raise InvalidArgumentError("Reference must contain at least one word")
    if not hyp_words:
        return 1.0
    return float(jiwer.wer(" ".join(ref_words), " ".join(hyp_words)))


def code_accuracy(pred: CodeSequence, truth: CodeSequence,
                  frame_mask: Optional[torch.Tensor] = None) -> float:
    if pred.ids.shape != truth.ids.shape:
        raise InvalidArgumentError(f"Length mismatch: {tuple(pred.ids.shape)} vs {tuple(truth.ids.shape)}")
    matches = pred.ids == truth.ids
    if frame_mask is not None:
        matches = matches[frame_mask]
    if matches.numel() == 0:
        raise InvalidArgumentError("No frames to score")
    return float(matches.double().mean())


@dataclass
class MetricsReport:
    wer_by_condition: Dict[Tuple[str, int], float] = field(default_factory=dict)
    code_accuracy_by_condition: Dict[Tuple[str, int], float] = field(default_factory=dict)
    n_utts_by_condition: Dict[Tuple[str, int], int] = field(default_factory=dict)
    loss_curves: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def code_accuracy_by_snr(self) -> Dict[int, float]:
        """Code accuracy per SNR, averaged over noise types."""
        by_snr: Dict[int, List[float]] = defaultdict(list)
        for (_, snr), acc in self.code_accuracy_by_condition.items():
            by_snr[snr].append(acc)
        return {snr: sum(v) / len(v) for snr, v in sorted(by_snr.items())}

    def rows(self) -> List[Dict[str, object]]:
        rows = []
        for noise_type, snr in sorted(self.wer_by_condition):
            acc = self.code_accuracy_by_condition.get((noise_type, snr))
            rows.append({
                "noise_type": noise_type,
                "snr_db": snr,
                "wer": round(self.wer_by_condition[(noise_type, snr)], 6),
                "code_acc": "" if acc is None else round(acc, 6),
                "n_utts": self.n_utts_by_condition.get((noise_type, snr), 0),
            })
        return rows

    def family_average(self, noise_types: Sequence[str]) -> Optional[float]:
        values = [w for (nt, _), w in self.wer_by_condition.items() if nt in noise_types]
        return sum(values) / len(values) if values else None

    def summary(self) -> Dict[str, Optional[float]]:
        all_types = sorted({nt for nt, _ in self.wer_by_condition})
        accs = list(self.code_accuracy_by_condition.values())
        return {
            "wer_stationary": self.family_average(STATIONARY_NOISE_TYPES),
            "wer_non_stationary": self.family_average(NON_STATIONARY_NOISE_TYPES),
            "wer_all": self.family_average(all_types),
            "code_acc_mean": sum(accs) / len(accs) if accs else None,
        }

    def write_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())

    def to_dict(self) -> Dict[str, object]:
        return {
            "conditions": self.rows(),
            "code_accuracy_by_snr": {str(k): v for k, v in self.code_accuracy_by_snr.items()},
            "summary": self.summary(),
            "loss_curves": self.loss_curves,
        }

    def write_json(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


class MetricsAccumulator:
    """Collects per-utterance results and reduces them in utterance-id order."""

    def __init__(self):
        self._items: Dict[str, Tuple[str, int, str, str, int, int]] = {}

    def add(self, utt_id: str, noise_type: str, snr_db: float, reference: str, hypothesis: str,
            code_correct: int = 0, code_total: int = 0) -> None:
        self._items[utt_id] = (noise_type, int(round(snr_db)), reference, hypothesis, code_correct, code_total)

    def __len__(self) -> int:
        return len(self._items)

    def report(self, loss_curves: Optional[Dict[str, List[float]]] = None) -> MetricsReport:
        grouped: Dict[Tuple[str, int], List[Tuple[str, str, int, int]]] = defaultdict(list)
        for utt_id in sorted(self._items):
            noise_type, snr, ref, hyp, correct, total = self._items[utt_id]
            grouped[(noise_type, snr)].append((ref, hyp, correct, total))

        report = MetricsReport(loss_curves=dict(loss_curves or {}))
        for condition, items in sorted(grouped.items()):
            refs = [ref for ref, _, _, _ in items]
            hyps = [hyp for _, hyp, _, _ in items]
            report.wer_by_condition[condition] = corpus_wer(refs, hyps)
            total = sum(t for _, _, _, t in items)
            if total:
                report.code_accuracy_by_condition[condition] = sum(c for _, _, c, _ in items) / total
            report.n_utts_by_condition[condition] = len(items)
        return report


def corpus_wer(references: Sequence[str], hypotheses: Sequence[str]) -> float:
    """Total word edits over total reference words."""
    edits = 0.0
    words = 0
    for ref, hyp in zip(references, hypotheses):
        n = len(_as_words(ref))
        edits += wer(ref, hyp) * n
        words += n
    if words == 0:
        raise InvalidArgumentError("No reference words to score")
    return edits / words
