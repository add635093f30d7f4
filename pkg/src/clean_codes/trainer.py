"""
Staged training: backbone pre-training, codebook pre-training and finetuning,
plus the learning-rate schedule, feature augmentation, checkpoints and evaluation.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Union

import numpy as np
import torch
from setproctitle import setproctitle

from .asr_eval import MetricsAccumulator, MetricsReport
from .backbone import WaveFeatures, sample_mask
from .config import CleanCodesConfig
from .corpus import derive_seed
from .data import PairedDataset
from .errors import InvalidArgumentError, InvalidStateError
from .model import CleanCodesModel

logger = logging.getLogger(__name__)

STAGES = ("pretrain_backbone", "pretrain_codebook", "finetune")
FREEZABLE = ("encoder", "codebook")


def schedule_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if total_steps < 1:
        raise InvalidArgumentError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 < warmup_frac < 1.0:
        raise InvalidArgumentError(f"warmup_frac must be in (0, 1), got {warmup_frac}")
    warmup_steps = warmup_frac * total_steps
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class StageConfig:
    stage: str
    steps: int
    peak_lr: float = 5e-4
    warmup_frac: float = 0.2
    batch_size: int = 8
    seed: int = 0
    freeze: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"Unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise InvalidArgumentError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.freeze is None:
            self.freeze = frozenset({"codebook"}) if self.stage == "finetune" else frozenset()
        self.freeze = frozenset(self.freeze)
        unknown = self.freeze - set(FREEZABLE)
        if unknown:
            raise InvalidArgumentError(f"Unknown freeze targets: {sorted(unknown)}")
        if self.stage == "pretrain_codebook" and "codebook" in self.freeze:
            raise InvalidArgumentError("Codebook pre-training cannot freeze the codebook")

    @classmethod
    def from_config(cls, config: CleanCodesConfig, stage: str) -> "StageConfig":
        train_cfg = config.get_train_config()
        section = train_cfg.get(stage, {})
        freeze = set()
        if stage == "finetune":
            if config.get("codebook.frozen", True):
                freeze.add("codebook")
            if train_cfg.get("freeze_encoder", False):
                freeze.add("encoder")
        return cls(
            stage=stage,
            steps=int(section.get("steps", 1000)),
            peak_lr=float(section.get("peak_lr", 5e-4)),
            warmup_frac=float(section.get("warmup_frac", 0.2)),
            batch_size=int(train_cfg.get("batch_size", 8)),
            seed=int(train_cfg.get("seed", 0)),
            freeze=frozenset(freeze),
        )


@dataclass
class AugmentSpec:
    time_mask_prob: float = 0.065
    time_span: int = 10
    freq_mask_prob: float = 0.05
    freq_span: int = 8

    def __post_init__(self):
        for name in ("time_mask_prob", "freq_mask_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")
        if self.time_span < 1 or self.freq_span < 1:
            raise InvalidArgumentError("Augment spans must be >= 1")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AugmentSpec":
        return cls(**{k: v for k, v in values.items() if k in cls.__dataclass_fields__})


def _time_mask(length: int, prob: float, span: int, seed: int) -> torch.Tensor:
    if prob <= 0.0:
        return torch.zeros(length, dtype=torch.bool)
    if prob >= 1.0:
        return torch.ones(length, dtype=torch.bool)
    return sample_mask(length, prob, span, seed).to_tensor(length)


def _channel_mask(channels: int, prob: float, span: int, seed: int) -> torch.Tensor:
    """Channel spans whose starts are shifted left so a full span always fits."""
    mask = torch.zeros(channels, dtype=torch.bool)
    if prob <= 0.0:
        return mask
    rng = np.random.default_rng(seed)
    starts = np.nonzero(rng.random(channels) < prob)[0]
    for start in starts:
        start = min(int(start), channels - span)
        mask[start:start + span] = True
    return mask


def apply_augment(features: Union[WaveFeatures, torch.Tensor], spec: AugmentSpec, seed: int,
                  mask_embedding: Optional[torch.Tensor] = None,
                  lengths: Optional[torch.Tensor] = None):
    """
    Time spans are replaced by the mask embedding, channel spans are zeroed.

    Args:
        features: WaveFeatures or a (B, T, D) tensor
        spec: Mask probabilities and spans
        seed: Per-call seed; utterance ``i`` uses ``derive_seed(seed, i)``
        mask_embedding: Vector used for masked frames (zeros when omitted)
        lengths: Valid frames per utterance for tensor input

    Returns:
        The same kind of object as ``features``
    """
    values = features.values if isinstance(features, WaveFeatures) else features
    if isinstance(features, WaveFeatures):
        lengths = features.lengths
    batch, frames, channels = values.shape
    if spec.freq_span > channels:
        raise InvalidArgumentError(f"freq_span {spec.freq_span} exceeds {channels} channels")
    if spec.time_mask_prob == 0.0 and spec.freq_mask_prob == 0.0:
        return features
    if lengths is None:
        lengths = torch.full((batch,), frames, dtype=torch.long)

    time_mask = torch.zeros(batch, frames, dtype=torch.bool)
    channel_mask = torch.zeros(batch, channels, dtype=torch.bool)
    for i, n in enumerate(lengths.tolist()):
        time_mask[i, :n] = _time_mask(n, spec.time_mask_prob, spec.time_span, derive_seed(seed, i, 0))
        channel_mask[i] = _channel_mask(channels, spec.freq_mask_prob, spec.freq_span, derive_seed(seed, i, 1))
    time_mask = time_mask.to(values.device)
    channel_mask = channel_mask.to(values.device)

    if mask_embedding is None:
        mask_embedding = values.new_zeros(channels)
    out = torch.where(time_mask.unsqueeze(-1), mask_embedding.to(values.dtype).expand_as(values), values)
    out = out.masked_fill(channel_mask.unsqueeze(1), 0.0)
    if isinstance(features, WaveFeatures):
        return WaveFeatures(values=out, frame_shift_ms=features.frame_shift_ms,
                            lengths=features.lengths, activations=features.activations)
    return out


@dataclass
class Checkpoint:
    stage: str
    step: int
    model_state: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]] = None
    scheduler_state: Optional[Dict[str, Any]] = None
    rng_state: Optional[torch.Tensor] = None
    loss_curve: List[float] = field(default_factory=list)
    codebook: Optional[Dict[str, Any]] = None

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save({
            "stage": self.stage,
            "step": self.step,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "scheduler": self.scheduler_state,
            "rng_state": self.rng_state,
            "config": self.config,
            "loss_curve": self.loss_curve,
            "codebook": self.codebook,
        }, path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.exists(path):
            raise InvalidStateError(f"Checkpoint not found: {path}")
        archive = torch.load(path, map_location="cpu", weights_only=False)
        return cls(
            stage=archive["stage"],
            step=archive["step"],
            model_state=archive["model"],
            config=archive["config"],
            optimizer_state=archive.get("optimizer"),
            scheduler_state=archive.get("scheduler"),
            rng_state=archive.get("rng_state"),
            loss_curve=list(archive.get("loss_curve", [])),
            codebook=archive.get("codebook"),
        )


def checkpoint_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}.pt")


def load_pretrained(model: CleanCodesModel, checkpoint: Checkpoint,
                    parts: Iterable[str] = ("backbone", "codebook")) -> List[str]:
    """Copy the parameters under the given top-level prefixes; returns the loaded names."""
    prefixes = tuple(f"{part}." for part in parts)
    own = model.state_dict()
    selected = {k: v for k, v in checkpoint.model_state.items() if k.startswith(prefixes) and k in own}
    for name, value in selected.items():
        if own[name].shape != value.shape:
            raise InvalidStateError(
                f"Checkpoint tensor {name} has shape {tuple(value.shape)}, model expects {tuple(own[name].shape)}"
            )
    model.load_state_dict(selected, strict=False)
    return sorted(selected)


def build_model(config: CleanCodesConfig, dtype: torch.dtype = torch.float32) -> CleanCodesModel:
    torch.manual_seed(int(config.get("train.seed", 0)))
    return CleanCodesModel.from_config(config).to(dtype)


@dataclass
class StepUpdate:
    loss: float
    stats: Dict[str, float]
    frames: Optional[torch.Tensor] = None


def optimizer_step(loss: torch.Tensor, stats: Dict[str, float], optimizer: torch.optim.Optimizer,
                   scheduler=None) -> StepUpdate:
    if not torch.isfinite(loss):
        raise InvalidStateError(f"Non-finite training loss {float(loss)}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepUpdate(loss=float(loss), stats=stats)


def pretrain_codebook_step(batch, model: CleanCodesModel, optimizer: torch.optim.Optimizer,
                           scheduler=None) -> StepUpdate:
    """
    One codebook pre-training update on a paired batch.

    Encodes the clean side, quantizes it against the model's codebook and
    applies the codebook/commitment loss through ``optimizer``. The returned
    frames are the valid clean frames, used for dead-code reseeding.
    """
    loss, stats, frames = model.pretrain_codebook_loss(batch)
    update = optimizer_step(loss, stats, optimizer, scheduler)
    update.frames = frames.detach()
    return update


@dataclass
class StageResult:
    checkpoint: Checkpoint
    loss_curve: List[float]
    model: CleanCodesModel


class StageRunner:
    """Runs one training stage and owns the model state while doing so."""

    def __init__(self, config: CleanCodesConfig, stage: StageConfig, dataset: PairedDataset,
                 out_dir: Optional[str] = None, dtype: torch.dtype = torch.float32):
        self.config = config
        self.stage = stage
        self.dataset = dataset
        self.out_dir = out_dir
        self.dtype = dtype
        self.logger = logging.getLogger(__name__)
        self.augment = AugmentSpec.from_dict(config.get("train.augment", {}) or {})
        self.log_every = int(config.get("train.log_every", 50))

    def _dependency(self, name: str, provided: Dict[str, Checkpoint], allowed: bool,
                    flag: str) -> Optional[Checkpoint]:
        checkpoint = provided.get(name)
        if checkpoint is None and self.out_dir and os.path.exists(checkpoint_path(self.out_dir, name)):
            checkpoint = Checkpoint.load(checkpoint_path(self.out_dir, name))
        if checkpoint is None and not allowed:
            raise InvalidStateError(
                f"Stage {self.stage.stage} needs a {name} checkpoint (or {flag} to start from random weights)"
            )
        return checkpoint

    def prepare_model(self, dependencies: Dict[str, Checkpoint]) -> CleanCodesModel:
        """Build the model and load the weights the stage depends on."""
        model = build_model(self.config, self.dtype)
        allow_backbone = bool(self.config.get("train.allow_random_backbone", False))
        allow_codebook = bool(self.config.get("train.allow_random_codebook", False))
        pretrained_codebook = bool(self.config.get("codebook.pretrained", True))

        if self.stage.stage == "pretrain_backbone":
            return model
        if self.stage.stage == "pretrain_codebook":
            if not model.codebook_enabled:
                raise InvalidStateError("Codebook pre-training requested with codebook.enabled = false")
            backbone = self._dependency("pretrain_backbone", dependencies, allow_backbone,
                                        "train.allow_random_backbone")
            if backbone is not None:
                load_pretrained(model, backbone, ("backbone",))
            return model

        if model.codebook_enabled and pretrained_codebook:
            codebook = self._dependency("pretrain_codebook", dependencies, allow_codebook,
                                        "--allow-random-codebook")
            if codebook is not None:
                load_pretrained(model, codebook, ("backbone", "codebook"))
                return model
        backbone = self._dependency("pretrain_backbone", dependencies, allow_backbone,
                                    "train.allow_random_backbone")
        if backbone is not None:
            load_pretrained(model, backbone, ("backbone",))
        return model

    def _apply_freeze(self, model: CleanCodesModel) -> None:
        if self.stage.stage == "pretrain_codebook":
            model.codebook.unfreeze()
        if "codebook" in self.stage.freeze and model.codebook is not None:
            model.codebook.freeze()
        if "encoder" in self.stage.freeze:
            for parameter in model.backbone.parameters():
                parameter.requires_grad_(False)

    def _trainable(self, model: CleanCodesModel) -> List[torch.nn.Parameter]:
        if self.stage.stage == "pretrain_backbone":
            modules = [model.backbone]
        elif self.stage.stage == "pretrain_codebook":
            modules = [model.backbone, model.codebook]
        else:
            modules = [model]
        seen = set()
        params = []
        for module in modules:
            for parameter in module.parameters():
                if parameter.requires_grad and id(parameter) not in seen:
                    seen.add(id(parameter))
                    params.append(parameter)
        return params

    def _optimizer(self, params: List[torch.nn.Parameter]):
        train_cfg = self.config.get_train_config()
        optimizer = torch.optim.Adam(
            params,
            lr=self.stage.peak_lr,
            betas=tuple(train_cfg.get("adam_betas", (0.9, 0.98))),
            eps=float(train_cfg.get("adam_eps", 1e-6)),
        )
        steps, warmup = self.stage.steps, self.stage.warmup_frac
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda step: schedule_lr(min(step, steps), steps, 1.0, warmup)
        )
        return optimizer, scheduler

    def _init_codebook(self, model: CleanCodesModel) -> None:
        if model.codebook is None or bool(model.codebook.initialized):
            return
        warmup = self.dataset.batch_for_step(0, self.stage.batch_size, self.stage.seed, self.dtype)
        with torch.no_grad():
            z_c = model.clean_representation(warmup)
            model.codebook.init_from(z_c.values[~z_c.padding_mask], seed=self.stage.seed)
        self.logger.info(f"Seeded {model.codebook.num_entries} codebook entries with k-means++")

    def _cached_truth(self, model: CleanCodesModel, batch, cache: Dict[str, torch.Tensor]):
        missing = [i for i, utt in enumerate(batch.ids) if utt not in cache]
        if missing:
            ids = model.truth_codes(batch)
            for i in missing:
                cache[batch.ids[i]] = ids[i].clone()
        max_len = max(cache[utt].shape[0] for utt in batch.ids)
        out = torch.zeros(len(batch), max_len, dtype=torch.long)
        for i, utt in enumerate(batch.ids):
            out[i, :cache[utt].shape[0]] = cache[utt]
        return out

    def run(self, dependencies: Optional[Dict[str, Checkpoint]] = None,
            resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None) -> StageResult:
        """Train from step 0 (or the resumed step) up to ``stop_at`` or the end of the schedule."""
        stage = self.stage
        setproctitle(f"clean-codes {stage.stage}")
        print(f"🏋️  Stage {stage.stage}: {stage.steps} steps, peak lr {stage.peak_lr}, seed {stage.seed}")

        if resume is not None:
            model = build_model(self.config, self.dtype)
        else:
            model = self.prepare_model(dependencies or {})
            if stage.stage == "pretrain_codebook":
                self._init_codebook(model)
        self._apply_freeze(model)
        frozen_names = [name for name, p in model.named_parameters() if not p.requires_grad]
        if frozen_names:
            self.logger.info(f"Frozen parameters: {len(frozen_names)} tensors ({sorted(stage.freeze)})")

        optimizer, scheduler = self._optimizer(self._trainable(model))
        start_step = 0
        loss_curve: List[float] = []
        if resume is not None:
            if resume.stage != stage.stage:
                raise InvalidStateError(f"Cannot resume {stage.stage} from a {resume.stage} checkpoint")
            model.load_state_dict(resume.model_state)
            self._apply_freeze(model)
            optimizer.load_state_dict(resume.optimizer_state)
            scheduler.load_state_dict(resume.scheduler_state)
            start_step = resume.step
            loss_curve = list(resume.loss_curve)
            if resume.rng_state is not None:
                torch.set_rng_state(resume.rng_state)
            self.logger.info(f"Resumed {stage.stage} at step {start_step}")

        cache_truth = (stage.stage == "finetune" and "encoder" in stage.freeze
                       and bool(self.config.get("predictor.cache_targets", True)))
        truth_cache: Dict[str, torch.Tensor] = {}
        steps_per_epoch = self.dataset.steps_per_epoch(stage.batch_size)

        model.train()
        end_step = stage.steps if stop_at is None else min(stop_at, stage.steps)
        for step in range(start_step, end_step):
            batch = self.dataset.batch_for_step(step, stage.batch_size, stage.seed, self.dtype)
            generator = torch.Generator().manual_seed(derive_seed(stage.seed, step))
            step_seed = derive_seed(stage.seed, step, 1)
            frames = None

            if stage.stage == "pretrain_codebook":
                update = pretrain_codebook_step(batch, model, optimizer, scheduler)
                frames = update.frames
            elif stage.stage == "pretrain_backbone":
                loss, stats = model.pretrain_backbone_loss(batch, step_seed, generator)
                update = optimizer_step(loss, stats, optimizer, scheduler)
            else:
                truth = self._cached_truth(model, batch, truth_cache) if cache_truth else None
                augment = partial(apply_augment, spec=self.augment, seed=step_seed,
                                  mask_embedding=model.backbone.context.mask_embedding)
                output = model.finetune_forward(batch, generator, truth, augment)
                update = optimizer_step(output.loss, output.stats(), optimizer, scheduler)
            stats = update.stats
            loss_curve.append(update.loss)

            if stage.stage == "pretrain_codebook" and (step + 1) % steps_per_epoch == 0:
                model.codebook.end_epoch(frames, seed=derive_seed(stage.seed, step, 2))
            if step % self.log_every == 0 or step == stage.steps - 1:
                details = ", ".join(f"{k}={v:.4f}" for k, v in stats.items())
                self.logger.info(f"[{stage.stage}] step {step + 1}/{stage.steps} lr={scheduler.get_last_lr()[0]:.2e} {details}")

        checkpoint = self.make_checkpoint(model, optimizer, scheduler, end_step, loss_curve)
        if self.out_dir:
            path = checkpoint_path(self.out_dir, stage.stage)
            checkpoint.save(path)
            with open(os.path.join(self.out_dir, f"{stage.stage}.loss.json"), "w") as f:
                json.dump(loss_curve, f)
            print(f"💾 Saved {stage.stage} checkpoint to {path}")
        return StageResult(checkpoint=checkpoint, loss_curve=loss_curve, model=model)

    def make_checkpoint(self, model: CleanCodesModel, optimizer, scheduler, step: int,
                        loss_curve: List[float]) -> Checkpoint:
        codebook = None
        if model.codebook is not None:
            codebook = {
                "num_entries": model.codebook.num_entries,
                "dim": model.codebook.dim,
                "entries": model.codebook.entries.detach().clone(),
            }
        return Checkpoint(
            stage=self.stage.stage,
            step=step,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            config=self.config.to_dict(),
            optimizer_state=optimizer.state_dict(),
            scheduler_state=scheduler.state_dict(),
            rng_state=torch.get_rng_state(),
            loss_curve=list(loss_curve),
            codebook=codebook,
        )


def run_stage(config: CleanCodesConfig, stage: Union[str, StageConfig], dataset: PairedDataset,
              out_dir: Optional[str] = None, dependencies: Optional[Dict[str, Checkpoint]] = None,
              resume: Optional[Checkpoint] = None, dtype: torch.dtype = torch.float32,
              stop_at: Optional[int] = None) -> StageResult:
    """Run one training stage; returns its checkpoint and per-step loss curve."""
    if isinstance(stage, str):
        stage = StageConfig.from_config(config, stage)
    return StageRunner(config, stage, dataset, out_dir, dtype).run(dependencies, resume, stop_at)


def model_from_checkpoint(checkpoint: Checkpoint) -> CleanCodesModel:
    config = CleanCodesConfig(None, overrides=checkpoint.config)
    model = CleanCodesModel.from_config(config)
    dtype = next(iter(checkpoint.model_state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(checkpoint.model_state)
    model.eval()
    return model


@torch.no_grad()
def evaluate(model: CleanCodesModel, dataset: PairedDataset, batch_size: int = 16,
             loss_curves: Optional[Dict[str, List[float]]] = None) -> MetricsReport:
    """WER per (noise type, SNR) and, with a codebook, code accuracy per condition."""
    accumulator = MetricsAccumulator()
    dtype = next(model.parameters()).dtype
    for batch in dataset.iterate(batch_size, seed=None, dtype=dtype):
        result = model.transcribe(batch)
        truth = result.extras.get("truth_codes")
        for i, hypothesis in enumerate(result.hypotheses):
            correct = total = 0
            if result.predicted_codes is not None and truth is not None:
                n = int(result.frame_lengths[i])
                correct = int((result.predicted_codes[i, :n] == truth[i, :n]).sum())
                total = n
            accumulator.add(batch.ids[i], batch.noise_types[i], batch.snr_db[i], batch.transcripts[i],
                            hypothesis.text, correct, total)
    report = accumulator.report(loss_curves)
    logger.info(f"Evaluated {len(accumulator)} utterances: {report.summary()}")
    return report
