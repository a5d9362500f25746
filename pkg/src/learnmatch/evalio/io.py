"""Checkpoints, metrics CSV and embedding export.

Checkpoints are one JSON document::

    {"version": 1, "config": {...}, "tensors": {name: {"shape": [...], "data": [...]}}}

Python's float ``repr`` is the shortest string that round-trips, so 64-bit
values survive the trip unchanged.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..datasets import Dataset
from ..diffmath import ShapeError
from ..models import ModelBundle
from .config import ConfigError, ExperimentConfig, from_dict

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("epoch", "step", "loss_cls", "loss_match", "loss_meta", "target_accuracy",
                   "a_distance", "seed")


class CheckpointError(ValueError):
    pass


def save_checkpoint(bundle: ModelBundle, config: ExperimentConfig, path) -> None:
    tensors = {name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
               for name, p in bundle.all_params().items()}
    doc = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "tensors": tensors}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def _field(doc: dict, key: str, kind, where: str = ""):
    if key not in doc:
        raise CheckpointError(f"checkpoint is missing field {where}{key!r}")
    if not isinstance(doc[key], kind):
        raise CheckpointError(f"checkpoint field {where}{key!r} has the wrong type")
    return doc[key]


def load_checkpoint(path) -> tuple[ModelBundle, ExperimentConfig]:
    """Rebuild the bundle from the stored config, then fill every tensor.

    Raises FileNotFoundError for a missing file, CheckpointError for a malformed
    document and ShapeError for a tensor whose shape disagrees with the config.
    """
    from ..l2m import bundle_for  # local: l2m imports this package

    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: malformed checkpoint ({err.msg} at char {err.pos})") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    version = _field(doc, "version", int)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint field 'version' is {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = from_dict(_field(doc, "config", dict))
    except ConfigError as err:
        raise CheckpointError(f"checkpoint field 'config': {err}") from None
    tensors = _field(doc, "tensors", dict)
    for name in ("feature.W0", "classifier.W0"):
        entry = _field(tensors, name, dict, "tensors.")
        shape = _field(entry, "shape", list, f"tensors.{name}.")
        if len(shape) != 2:
            raise ShapeError(f"tensor {name!r} must be 2-D, got shape {shape}")
    in_dim = tensors["feature.W0"]["shape"][0]
    num_classes = tensors["classifier.W0"]["shape"][1]
    bundle = bundle_for(config, in_dim, num_classes)
    params = bundle.all_params()
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors {extra}")
    for name, p in params.items():
        entry = _field(tensors, name, dict, "tensors.")
        shape = tuple(_field(entry, "shape", list, f"tensors.{name}."))
        data = _field(entry, "data", list, f"tensors.{name}.")
        if shape != p.data.shape:
            raise ShapeError(f"tensor {name!r} has shape {shape}, expected {p.data.shape}")
        if len(data) != math.prod(shape):
            raise ShapeError(f"tensor {name!r} holds {len(data)} values for shape {shape}")
        try:
            p.data = np.asarray(data, dtype=np.float64).reshape(shape)
        except (TypeError, ValueError):
            raise CheckpointError(f"tensor {name!r} has non-numeric data") from None
    return bundle, config


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


class MetricsLog:
    """Append-only metrics CSV; the header is written once, before the first row."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self._header_done = append and self.path.exists() and self.path.stat().st_size > 0
        if not append:
            self.path.write_text("", encoding="utf-8")

    def write(self, row) -> None:
        write_metrics_row(self, row)


def write_metrics_row(log: MetricsLog, row) -> None:
    with open(log.path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not log._header_done:
            w.writerow(METRICS_COLUMNS)
            log._header_done = True
        w.writerow([_fmt(getattr(row, c)) for c in METRICS_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, strict=True))
    out = []
    for r in rows:
        out.append({k: (None if r[k] == "" else int(r[k]) if k in ("epoch", "step", "seed") else float(r[k]))
                    for k in METRICS_COLUMNS})
    return out


def export_embeddings(bundle: ModelBundle, dataset: Dataset, path) -> int:
    """Write ``e0..e{d-1}, label, domain`` per sample; returns the row count."""
    emb = bundle.embed(dataset.features)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e{j}" for j in range(emb.shape[1])] + ["label", "domain"])
        for vec, label in zip(emb, dataset.labels):
            w.writerow([repr(float(v)) for v in vec] + [int(label), dataset.domain_tag])
    return emb.shape[0]
