"""
Raw-array export of representations and codebook entries for external plotting.

Each export writes ``<which>.npy`` (row-major float32), ``<which>.meta.json``
(utterance ids, frame offsets and code ids) and ``<which>.pca.csv`` (2-D PCA).
"""

import csv
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
from sklearn.decomposition import PCA

from .corpus import Manifest
from .data import PairedDataset
from .errors import InvalidArgumentError, InvalidStateError
from .trainer import Checkpoint, model_from_checkpoint

logger = logging.getLogger(__name__)

EXPORT_KINDS = ("Z_n", "Z_c", "Z_q", "Z_f", "codebook")
CODEBOOK_KINDS = ("Z_q", "Z_f", "codebook")


@dataclass
class ExportResult:
    which: str
    matrix_path: str
    meta_path: str
    pca_path: str
    shape: tuple


def pca_projection(matrix: np.ndarray) -> np.ndarray:
    """(rows, 2) projection onto the two leading principal components."""
    if matrix.shape[0] < 2 or matrix.shape[1] < 2:
        raise InvalidArgumentError(f"PCA needs at least a 2x2 matrix, got {matrix.shape}")
    return PCA(n_components=2, svd_solver="full").fit_transform(matrix.astype(np.float64))


def _collect(model, dataset: PairedDataset, which: str, batch_size: int):
    rows: List[np.ndarray] = []
    utterances: List[Dict[str, object]] = []
    offset = 0
    id_key = f"{which}_ids" if which in ("Z_q", "Z_c") else None
    for batch in dataset.iterate(batch_size, seed=None, dtype=next(model.parameters()).dtype):
        reps = model.representations(batch)
        for i, n in enumerate(reps["frame_lengths"].tolist()):
            rows.append(reps[which][i, :n].float().cpu().numpy())
            record: Dict[str, object] = {"id": batch.ids[i], "offset": offset, "frames": n}
            if id_key and id_key in reps:
                record["code_ids"] = [int(c) for c in reps[id_key][i, :n].tolist()]
            utterances.append(record)
            offset += n
    return np.concatenate(rows, axis=0), utterances


def export_features(checkpoint: Checkpoint, manifest: Optional[Manifest], which: str, out_dir: str,
                    split: str = "test", batch_size: int = 16) -> ExportResult:
    """Write one representation (or the codebook) of a checkpoint to ``out_dir``."""
    if which not in EXPORT_KINDS:
        raise InvalidArgumentError(f"Unknown export {which!r}, expected one of {EXPORT_KINDS}")
    model = model_from_checkpoint(checkpoint)
    if which in CODEBOOK_KINDS and model.codebook is None:
        raise InvalidStateError(f"Checkpoint has no codebook, cannot export {which}")

    meta: Dict[str, object] = {"which": which, "stage": checkpoint.stage, "step": checkpoint.step}
    if which == "codebook":
        matrix = model.codebook.entries.detach().float().cpu().numpy()
        meta["num_entries"] = int(matrix.shape[0])
    else:
        if manifest is None:
            raise InvalidArgumentError(f"Exporting {which} needs a manifest")
        dataset = PairedDataset.from_manifest(manifest, split)
        with torch.no_grad():
            matrix, utterances = _collect(model, dataset, which, batch_size)
        meta.update({"split": split, "utterances": utterances})
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    meta["shape"] = list(matrix.shape)

    os.makedirs(out_dir, exist_ok=True)
    matrix_path = os.path.join(out_dir, f"{which}.npy")
    meta_path = os.path.join(out_dir, f"{which}.meta.json")
    pca_path = os.path.join(out_dir, f"{which}.pca.csv")
    np.save(matrix_path, matrix)
    with open(meta_path, "w") as f:
        f.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    projected = pca_projection(matrix)
    with open(pca_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "pc1", "pc2"])
        for i, (a, b) in enumerate(projected):
            writer.writerow([i, f"{a:.6f}", f"{b:.6f}"])

    logger.info(f"Exported {which} {matrix.shape} to {matrix_path}")
    return ExportResult(which=which, matrix_path=matrix_path, meta_path=meta_path,
                        pca_path=pca_path, shape=tuple(matrix.shape))
