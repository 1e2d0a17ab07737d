"""
Dataset CSV import / export.

Format
------
Header ``label,f0,f1,...,f{p-1}``, then one row per sample.  Labels are
non-negative integers; features are written with 17 significant digits so a
save/load cycle is exact.

Usage
-----
    from dataset_io import load_dataset_csv, save_dataset_csv

    data = load_dataset_csv("train.csv")
    save_dataset_csv(data, "copy.csv")
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from config import ContractError
from datasets import LabeledDataset
from round_trace import format_float

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Import
# ---------------------------------------------------------------------------

def load_dataset_csv(path: PathLike, num_classes: Optional[int] = None) -> LabeledDataset:
    """
    Read a labelled dataset.

    ``num_classes`` defaults to ``max(label) + 1``.  Malformed rows raise
    ContractError with the line number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "label":
            raise ContractError(f"{path}: first column must be 'label', got {header[:1]}")
        dim = len(header) - 1
        if dim < 1:
            raise ContractError(f"{path}: no feature columns")

        labels, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dim + 1:
                raise ContractError(f"{path}:{line_no}: expected {dim + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ContractError(f"{path}:{line_no}: {exc}") from None
            if label < 0:
                raise ContractError(f"{path}:{line_no}: negative label {label}")
            labels.append(label)
            rows.append(feats)

    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    label_arr = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(label_arr.max()) + 1 if label_arr.size else 1
    logger.info("loaded %d samples (p=%d) from %s", len(labels), dim, path)
    return LabeledDataset(features, label_arr, num_classes)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_dataset_csv(data: LabeledDataset, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(data.dim)])
        for label, feats in zip(data.labels, data.features):
            writer.writerow([int(label)] + [format_float(v) for v in feats])
    return path
