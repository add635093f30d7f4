"""
Ablation runner: one full pipeline per grid cell, shared seeds, one CSV row per cell.
"""

import csv
import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .config import CleanCodesConfig
from .data import PairedDataset
from .errors import InvalidArgumentError
from .iffnet import FUSION_KINDS
from .predictor import PREDICTOR_KINDS
from .trainer import Checkpoint, evaluate, model_from_checkpoint, run_stage

logger = logging.getLogger(__name__)

BOOLEAN_AXES = ("codebook.enabled", "codebook.pretrained", "codebook.frozen", "train.freeze_encoder")
POSITIVE_INT_AXES = ("codebook.num_entries", "predictor.blocks", "iffnet.repeats", "iffnet.bottleneck_dim")
CHOICE_AXES = {"predictor.kind": PREDICTOR_KINDS, "fusion.kind": FUSION_KINDS}
METRIC_COLUMNS = ["wer_all", "wer_stationary", "wer_non_stationary", "code_acc_mean"]

BACKBONE_KEYS = ("corpus", "backbone", "train.seed", "train.batch_size", "train.pretrain_backbone")
CODEBOOK_KEYS = BACKBONE_KEYS + ("codebook.num_entries", "codebook.beta_commit",
                                 "codebook.dead_code_epochs", "train.pretrain_codebook")


def _as_bool(axis: str, value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("yes", "true", "no", "false"):
        return value.lower() in ("yes", "true")
    raise InvalidArgumentError(f"Axis {axis} expects yes/no values, got {value!r}")


@dataclass
class AblationGrid:
    axes: Dict[str, List[Any]] = field(default_factory=dict)

    def __post_init__(self):
        normalized = {}
        for axis, values in self.axes.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise InvalidArgumentError(f"Axis {axis} needs a non-empty list of values")
            if axis in BOOLEAN_AXES:
                values = [_as_bool(axis, v) for v in values]
            elif axis in POSITIVE_INT_AXES:
                if not all(isinstance(v, int) and v >= 1 for v in values):
                    raise InvalidArgumentError(f"Axis {axis} expects positive integers, got {values}")
            elif axis in CHOICE_AXES:
                bad = [v for v in values if v not in CHOICE_AXES[axis]]
                if bad:
                    raise InvalidArgumentError(f"Axis {axis} has invalid values {bad}; choose from {CHOICE_AXES[axis]}")
            else:
                raise InvalidArgumentError(f"Unknown ablation axis {axis!r}")
            normalized[axis] = list(values)
        self.axes = normalized

    @classmethod
    def from_file(cls, path: str) -> "AblationGrid":
        with open(path) as f:
            document = yaml.safe_load(f) or {}
        return cls(axes=document.get("axes", document))

    @property
    def names(self) -> List[str]:
        return sorted(self.axes)

    def cells(self) -> List[Dict[str, Any]]:
        """Cartesian product in sorted-axis order; an empty grid is the base config alone."""
        names = self.names
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


def _stage_key(config: CleanCodesConfig, keys: Sequence[str]) -> str:
    payload = json.dumps({k: config.get(k) for k in keys}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class AblationRunner:
    """Runs every cell of a grid, reusing pre-training stages shared between cells."""

    def __init__(self, base_config: CleanCodesConfig, train_set: PairedDataset, eval_set: PairedDataset,
                 out_dir: str, eval_batch_size: int = 16):
        self.base_config = base_config
        self.train_set = train_set
        self.eval_set = eval_set
        self.out_dir = out_dir
        self.eval_batch_size = eval_batch_size
        self.logger = logging.getLogger(__name__)
        self._cache: Dict[str, Checkpoint] = {}

    def _cached_stage(self, config: CleanCodesConfig, stage: str, keys: Sequence[str],
                      dependencies: Dict[str, Checkpoint]) -> Checkpoint:
        key = f"{stage}-{_stage_key(config, keys)}"
        if key not in self._cache:
            self._cache[key] = run_stage(config, stage, self.train_set,
                                         os.path.join(self.out_dir, "stages", key), dependencies).checkpoint
        else:
            self.logger.info(f"Reusing cached {stage} checkpoint {key}")
        return self._cache[key]

    def run_cell(self, cell: Dict[str, Any], seed: int, cell_dir: str) -> Dict[str, Any]:
        overrides = dict(cell)
        overrides["train.seed"] = seed
        config = self.base_config.with_overrides(overrides)
        if not config.get("codebook.pretrained", True):
            config = config.with_overrides({"train.allow_random_codebook": True})

        dependencies = {"pretrain_backbone": self._cached_stage(config, "pretrain_backbone", BACKBONE_KEYS, {})}
        if config.get("codebook.enabled", True) and config.get("codebook.pretrained", True):
            dependencies["pretrain_codebook"] = self._cached_stage(
                config, "pretrain_codebook", CODEBOOK_KEYS, dependencies)
        result = run_stage(config, "finetune", self.train_set, cell_dir, dependencies)
        model = model_from_checkpoint(result.checkpoint)
        report = evaluate(model, self.eval_set, self.eval_batch_size, {"finetune": result.loss_curve})
        report.write_csv(os.path.join(cell_dir, "metrics.csv"))
        report.write_json(os.path.join(cell_dir, "metrics.json"))
        return report.summary()

    def run(self, grid: AblationGrid, seeds: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
        seeds = list(seeds) if seeds else [int(self.base_config.get("train.seed", 0))]
        cells = grid.cells()
        print(f"🧪 Ablation: {len(cells)} cells x {len(seeds)} seeds")
        rows = []
        for index, cell in enumerate(cells):
            for seed in seeds:
                row: Dict[str, Any] = {"cell": index, **cell, "seed": seed}
                cell_dir = os.path.join(self.out_dir, "cells", f"{index:03d}-seed{seed}")
                try:
                    summary = self.run_cell(cell, seed, cell_dir)
                    row.update({"status": "ok", "error": ""})
                    row.update({k: summary.get(k) for k in METRIC_COLUMNS})
                    print(f"✅ Cell {index} seed {seed}: {summary}")
                except Exception as e:
                    self.logger.error(f"Ablation cell {index} ({cell}) seed {seed} failed: {e}")
                    row.update({"status": "failed", "error": str(e)})
                    row.update({k: None for k in METRIC_COLUMNS})
                rows.append(row)
        write_table(rows, grid.names, os.path.join(self.out_dir, "ablation.csv"))
        return rows


def write_table(rows: List[Dict[str, Any]], axis_names: Sequence[str], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    columns = ["cell", *axis_names, "seed", "status", *METRIC_COLUMNS, "error"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def run_ablation(grid: AblationGrid, base_config: CleanCodesConfig, train_set: PairedDataset,
                 eval_set: PairedDataset, out_dir: str, seeds: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
    eval_batch_size = int(base_config.get("eval.batch_size", 16))
    return AblationRunner(base_config, train_set, eval_set, out_dir, eval_batch_size).run(grid, seeds)
