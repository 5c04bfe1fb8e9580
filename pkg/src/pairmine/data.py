"""Synthetic cluster datasets, CSV feature ingestion, and P-K batch sampling.

Datasets are immutable after construction; all sampling takes an explicit
seed or Generator so sweeps can run on independent streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InfeasibleBatchError(ValueError):
    """Dataset cannot supply the requested class/instance structure."""


@dataclass
class LabeledDataset:
    """Feature matrix plus dense integer labels in [0, C)."""

    features: np.ndarray
    labels: np.ndarray
    # rows of the originating dataset when this one is a subset (meta sets)
    source_rows: np.ndarray | None = None
    class_rows: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (N, d), labels (N,)")
        if len(self.features) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("features and labels must be nonempty and aligned")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature entries")
        classes = np.unique(self.labels)
        if classes[0] != 0 or classes[-1] != len(classes) - 1:
            raise ValueError(f"labels must be dense in [0, C), got {classes.tolist()}")
        self.class_rows = {int(c): np.flatnonzero(self.labels == c) for c in classes}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_rows)


@dataclass
class Batch:
    """Row indices forming a P-K minibatch: P classes x n_instance rows each."""

    indices: np.ndarray
    labels: np.ndarray
    n_instance: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b = len(self.indices)
        if b == 0 or b % self.n_instance != 0 or len(self.labels) != b:
            raise ValueError(f"batch of {b} rows is not divisible into groups of {self.n_instance}")
        _, counts = np.unique(self.labels, return_counts=True)
        if len(counts) != b // self.n_instance or not np.all(counts == self.n_instance):
            raise ValueError("each sampled class must contribute exactly n_instance rows")

    @property
    def size(self) -> int:
        return len(self.indices)


def gen_gaussian_clusters(
    n_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed,
    radius: float = 2.0,
) -> LabeledDataset:
    """Gaussian blobs around class means drawn on a sphere of the given radius.

    Samples are mean + N(0, spread^2 I); deterministic per seed.
    """
    if n_classes < 2 or per_class < 2 or dim < 2:
        raise ValueError("need n_classes >= 2, per_class >= 2, dim >= 2")
    if spread <= 0 or radius <= 0:
        raise ValueError("spread and radius must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    feats = np.repeat(means, per_class, axis=0)
    feats = feats + spread * rng.standard_normal(feats.shape)
    labels = np.repeat(np.arange(n_classes), per_class)
    return LabeledDataset(features=feats, labels=labels)


def save_features_csv(dataset: LabeledDataset, path) -> None:
    """One row per sample: features then the integer label; repr floats round-trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, lab in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(x)) for x in row] + [int(lab)])


def load_features_csv(path) -> LabeledDataset:
    """Parse a header CSV (features..., integer label); relabels to dense [0, C)."""
    p = Path(path)
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{p}: empty file") from None
        width = len(header)
        if width < 2:
            raise ValueError(f"{p}: need at least one feature column plus a label")
        feats, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{p}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                feats.append([float(x) for x in row[:-1]])
            except ValueError:
                raise ValueError(f"{p}: line {lineno}: non-numeric feature value") from None
            try:
                raw_labels.append(int(row[-1]))
            except ValueError:
                raise ValueError(f"{p}: line {lineno}: non-integer label") from None
    if not feats:
        raise ValueError(f"{p}: no data rows")
    raw = np.array(raw_labels)
    _, dense = np.unique(raw, return_inverse=True)
    return LabeledDataset(features=np.array(feats), labels=dense)


def pk_sample(dataset: LabeledDataset, batch_size: int, n_instance: int, rng) -> Batch:
    """Draw batch_size/n_instance classes without replacement, n_instance rows each.

    Classes with fewer than n_instance samples are excluded up front, which is
    equivalent to rejecting and resampling them; raises when the dataset cannot
    supply enough eligible classes.
    """
    if n_instance < 1 or batch_size < 1 or batch_size % n_instance != 0:
        raise ValueError(f"batch_size {batch_size} must be a positive multiple of n_instance {n_instance}")
    n_groups = batch_size // n_instance
    eligible = [c for c, rows in dataset.class_rows.items() if len(rows) >= n_instance]
    if len(eligible) < n_groups:
        raise InfeasibleBatchError(
            f"need {n_groups} classes with >= {n_instance} samples, dataset has {len(eligible)}"
        )
    rng = np.random.default_rng(rng)
    chosen = rng.choice(np.array(sorted(eligible)), size=n_groups, replace=False)
    idx = []
    for c in chosen:
        rows = dataset.class_rows[int(c)]
        idx.append(rng.choice(rows, size=n_instance, replace=False))
    indices = np.concatenate(idx)
    return Batch(indices=indices, labels=dataset.labels[indices], n_instance=n_instance)


def build_meta_set(dataset: LabeledDataset, per_class: int, seed) -> LabeledDataset:
    """Class-complete subset with exactly per_class rows per class, seeded.

    The result records its source rows, so subsetness is checkable.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    picked = []
    for c in sorted(dataset.class_rows):
        rows = dataset.class_rows[c]
        if len(rows) < per_class:
            raise InfeasibleBatchError(f"class {c} has {len(rows)} samples, need {per_class}")
        picked.append(np.sort(rng.choice(rows, size=per_class, replace=False)))
    rows = np.concatenate(picked)
    return LabeledDataset(
        features=dataset.features[rows].copy(),
        labels=dataset.labels[rows].copy(),
        source_rows=rows,
    )


def split_dataset(dataset: LabeledDataset, test_fraction: float, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified train/test split; every class keeps at least one row per side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for c in sorted(dataset.class_rows):
        rows = dataset.class_rows[c].copy()
        rng.shuffle(rows)
        n_test = int(round(len(rows) * test_fraction))
        n_test = min(max(n_test, 1), len(rows) - 1)
        test_rows.append(np.sort(rows[:n_test]))
        train_rows.append(np.sort(rows[n_test:]))
    tr = np.concatenate(train_rows)
    te = np.concatenate(test_rows)
    return (
        LabeledDataset(features=dataset.features[tr].copy(), labels=dataset.labels[tr].copy(), source_rows=tr),
        LabeledDataset(features=dataset.features[te].copy(), labels=dataset.labels[te].copy(), source_rows=te),
    )
