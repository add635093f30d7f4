"""
Fast invariant self-checks run by the CLI before it reports success.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Tuple

import torch

from .asr_eval import ctc_loss
from .backbone import EncoderConfig, frame_count
from .codebook import Codebook, codebook_pretrain_loss
from .iffnet import Merge, ResNetBlock, SeparableSelfAttention
from .predictor import gumbel_select
from .trainer import schedule_lr

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def check_nn_lookup() -> Tuple[bool, str]:
    generator = torch.Generator().manual_seed(0)
    for _ in range(50):
        codebook = Codebook(16, 8)
        codebook.entries.data = torch.randn(16, 8, generator=generator, dtype=torch.float64).float()
        frames = torch.randn(12, 8, generator=generator)
        ids = codebook.nn_lookup(frames).ids
        brute = torch.stack([((codebook.entries - f) ** 2).sum(-1) for f in frames]).argmin(-1)
        if not torch.equal(ids, brute):
            return False, "nn_lookup disagrees with exhaustive scan"
    return True, "50 instances"


def check_ctc_worked_example() -> Tuple[bool, str]:
    probs = torch.tensor([[0.6, 0.4], [0.5, 0.5]], dtype=torch.float64)
    loss = float(ctc_loss(probs.log(), [1]))
    return abs(loss + math.log(0.7)) < 1e-9, f"loss={loss:.10f}"


def check_commitment_gradients() -> Tuple[bool, str]:
    z_c = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    z_q = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
    codebook_pretrain_loss(z_c, z_q, 0.25).backward()
    ok = abs(float(z_c.grad) - 0.3) < 1e-12 and abs(float(z_q.grad) + 1.2) < 1e-12
    return ok, f"dZc={float(z_c.grad):.4f} dZq={float(z_q.grad):.4f}"


def check_iffnet_identities() -> Tuple[bool, str]:
    torch.manual_seed(0)
    h = torch.randn(1, 1, 8)
    ssa = SeparableSelfAttention(8)
    temporal, _ = ssa.attention_maps(h)
    h_temp = h + temporal @ h
    if not torch.equal(h_temp, 2 * h):
        return False, "SSA T=1 doubling failed"
    block = ResNetBlock(8)
    block.zero_init_()
    x = torch.randn(2, 5, 8)
    if not torch.equal(block(x), x):
        return False, "zero-init ResNet block is not the identity"
    merge = Merge(8)
    a, b = torch.randn(2, 7, 8), torch.randn(2, 7, 8)
    fused, mask = merge(a, b)
    inside = bool(((fused >= torch.minimum(a, b)) & (fused <= torch.maximum(a, b))).all())
    strict = bool(((mask.values > 0) & (mask.values < 1)).all())
    return inside and strict, "merge convexity and gate bounds"


def check_schedule() -> Tuple[bool, str]:
    ok = (schedule_lr(0, 100, 5e-4, 0.2) == 0.0 and schedule_lr(100, 100, 5e-4, 0.2) == 0.0
          and abs(schedule_lr(20, 100, 5e-4, 0.2) - 5e-4) < 1e-15)
    return ok, "endpoints and peak"


def check_gumbel_limit() -> Tuple[bool, str]:
    generator = torch.Generator().manual_seed(0)
    logits = 3.0 * torch.randn(1000, 4, generator=generator, dtype=torch.float64)
    codes = gumbel_select(logits, 1e-4, True, generator=generator)
    agreement = float((codes.ids == logits.argmax(-1)).double().mean())
    return agreement >= 0.999, f"argmax agreement {agreement:.4f}"


def check_length_recurrence() -> Tuple[bool, str]:
    config = EncoderConfig.full_scale()
    length = 16000
    for kernel, stride in zip(config.kernels, config.strides):
        length = (length - kernel) // stride + 1
    return frame_count(16000, config) == length == 49, f"T={length}"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("nn_lookup", check_nn_lookup),
    ("ctc_worked_example", check_ctc_worked_example),
    ("commitment_gradients", check_commitment_gradients),
    ("iffnet_identities", check_iffnet_identities),
    ("lr_schedule", check_schedule),
    ("gumbel_limit", check_gumbel_limit),
    ("length_recurrence", check_length_recurrence),
]


def run_self_checks() -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"raised {e}"
        results.append(CheckResult(name, passed, detail))
        if passed:
            logger.debug(f"Self-check {name} passed ({detail})")
        else:
            logger.error(f"Self-check {name} failed: {detail}")
    return results
