"""Synthetic domain-shift generators, mini-batch planning and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffmath import DataError, ShapeError, UsageError

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_tag: str = SOURCE
    label_map: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(X).all():
            raise DataError("features contain NaN or Inf")
        if self.domain_tag not in (SOURCE, TARGET):
            raise DataError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def make_two_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Two interleaved half circles: class 0 on the upper unit half circle,
    class 1 on the lower one shifted to (1, 0.5)."""
    if n < 2 or n % 2:
        raise UsageError(f"two-moons needs an even n >= 2, got {n}")
    if noise_sd < 0:
        raise UsageError(f"noise_sd must be non-negative, got {noise_sd}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, math.pi, half)
    t1 = rng.uniform(0.0, math.pi, half)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower]) + noise_sd * rng.standard_normal((n, 2))
    y = np.repeat([0, 1], half)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], 2, SOURCE)


def rotate_domain(ds: Dataset, angle_deg: float) -> Dataset:
    if ds.dim != 2:
        raise ShapeError(f"rotate_domain needs 2-D features, got dimension {ds.dim}")
    a = math.radians(angle_deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return replace(ds, features=ds.features @ R.T, domain_tag=TARGET)


def blob_centers(C: int, d: int, radius: float = 4.0) -> np.ndarray:
    centers = np.zeros((C, d))
    angles = 2.0 * math.pi * np.arange(C) / C
    if d == 1:
        centers[:, 0] = radius * (np.arange(C) - (C - 1) / 2.0)
    else:
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def make_shifted_blobs(C: int, n_per_class: int, shift, scale: float, seed: int
                       ) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian classes for the source; the target draws the same
    classes translated by ``shift`` with standard deviation ``scale``."""
    if C < 2:
        raise UsageError(f"need at least two classes, got {C}")
    if scale <= 0:
        raise UsageError(f"scale must be positive, got {scale}")
    if n_per_class < 1:
        raise UsageError(f"n_per_class must be positive, got {n_per_class}")
    shift = np.atleast_1d(np.asarray(shift, dtype=np.float64))
    d = shift.shape[0]
    rng = np.random.default_rng(seed)
    centers = blob_centers(C, d)
    y = np.repeat(np.arange(C), n_per_class)
    Xs = centers[y] + rng.standard_normal((y.size, d))
    Xt = centers[y] + shift + scale * rng.standard_normal((y.size, d))
    return Dataset(Xs, y, C, SOURCE), Dataset(Xt, y.copy(), C, TARGET)


def standardize_with_source(source: Dataset, target: Dataset) -> tuple[Dataset, Dataset]:
    """Standardize both domains with the source mean and std (target stats are unknown in UDA)."""
    mu = source.features.mean(axis=0)
    sd = source.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (replace(source, features=(source.features - mu) / sd),
            replace(target, features=(target.features - mu) / sd))


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False
    epoch: int = 0


def batch_iterator(ds: Dataset | int, plan: BatchPlan) -> list[np.ndarray]:
    """Index batches for ``plan.epoch``; the shuffle depends only on (seed, epoch)."""
    n = ds if isinstance(ds, int) else ds.n
    if plan.batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {plan.batch_size}")
    if plan.drop_last and plan.batch_size > n:
        raise UsageError(f"batch_size {plan.batch_size} exceeds {n} samples with drop_last; epoch is empty")
    order = np.random.default_rng([plan.seed, plan.epoch]).permutation(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [order[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv_dataset(path, label_column: str | int = -1, domain_tag: str = SOURCE) -> Dataset:
    """Read a numeric CSV; the header row is detected by a non-numeric first line.

    Labels must be integer-valued and are remapped to 0..C-1 in sorted order;
    the mapping (original -> new) is kept in ``label_map``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    header = None
    first_line, first = rows[0]
    if not any(_is_number(c) for c in first):
        header = [c.strip() for c in first]
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: header only, no data rows")

    width = len(header) if header else len(rows[0][1])
    if isinstance(label_column, str):
        if header is None:
            raise DataError(f"{path}: label column {label_column!r} named but file has no header")
        try:
            col = header.index(label_column)
        except ValueError:
            raise DataError(f"{path}: no column named {label_column!r}") from None
    else:
        col = label_column % width

    feats, raw_labels = [], []
    for line, r in rows:
        if len(r) != width:
            raise DataError(f"{path}: line {line} has {len(r)} fields, expected {width}")
        cells = [c.strip() for c in r]
        lab = cells[col]
        try:
            lab_value = float(lab)
        except ValueError:
            raise DataError(f"{path}: line {line}: label {lab!r} is not an integer") from None
        if not lab_value.is_integer():
            raise DataError(f"{path}: line {line}: label {lab!r} is not an integer")
        raw_labels.append(int(lab_value))
        try:
            feats.append([float(c) for j, c in enumerate(cells) if j != col])
        except ValueError:
            raise DataError(f"{path}: line {line}: non-numeric feature value") from None

    classes = sorted(set(raw_labels))
    mapping = {orig: new for new, orig in enumerate(classes)}
    y = np.array([mapping[v] for v in raw_labels], dtype=np.int64)
    return Dataset(np.array(feats, dtype=np.float64), y, len(classes), domain_tag, label_map=mapping)


def save_csv_dataset(ds: Dataset, path) -> None:
    """Write features then the label column, with a header; floats use repr (round-trip exact)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
