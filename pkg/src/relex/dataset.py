"""Dataset ingestion, synthesis, splitting and relabeling.

Datasets are stored column-wise (a feature matrix plus integer label
vectors) because every consumer downstream works on whole arrays. The
per-row :class:`Instance` view exists for callers that want one example
at a time.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed dataset inputs or impossible operations."""


class Instance(NamedTuple):
    features: np.ndarray
    label: int
    subclass: int | None = None


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int
    subclass: np.ndarray | None = None
    original_class_count: int | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DatasetError("label vector length does not match row count")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise DatasetError("labels must lie in 0..class_count-1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.subclass is not None:
            s = np.asarray(self.subclass, dtype=np.int64)
            if s.shape != y.shape:
                raise DatasetError("subclass vector length does not match row count")
            s.setflags(write=False)
            object.__setattr__(self, "subclass", s)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Instance:
        s = None if self.subclass is None else int(self.subclass[i])
        return Instance(self.X[i], int(self.y[i]), s)

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def has_subclass(self) -> bool:
        return self.subclass is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.X[idx],
            self.y[idx],
            self.class_count,
            None if self.subclass is None else self.subclass[idx],
            self.original_class_count,
        )

    def with_features(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.y, self.class_count, self.subclass, self.original_class_count)

    def digest(self) -> str:
        """SHA-256 over the exact bytes of features and labels."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        if self.subclass is not None:
            h.update(np.ascontiguousarray(self.subclass).tobytes())
        return h.hexdigest()


def from_instances(instances: list[Instance], class_count: int | None = None) -> Dataset:
    if not instances:
        raise DatasetError("no instances")
    X = np.stack([np.asarray(z.features, dtype=np.float64) for z in instances])
    y = np.array([z.label for z in instances], dtype=np.int64)
    subs = [z.subclass for z in instances]
    s = None if all(v is None for v in subs) else np.array(subs, dtype=np.int64)
    return Dataset(X, y, class_count or int(y.max()) + 1, s)


# --------------------------------------------------------------------- CSV


def _dense_index(tokens: list[str]) -> tuple[np.ndarray, list[str]]:
    mapping: dict[str, int] = {}
    out = np.empty(len(tokens), dtype=np.int64)
    for i, t in enumerate(tokens):
        out[i] = mapping.setdefault(t, len(mapping))
    return out, list(mapping)


def load_csv(path, has_subclass: bool = False) -> Dataset:
    """Read ``f0,...,f{d-1},label[,subclass]`` rows.

    Labels (and subclasses) are arbitrary tokens, re-indexed densely in
    order of first appearance. Line numbers in errors count the header as
    line 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    n_tail = 2 if has_subclass else 1
    if len(header) < n_tail + 1:
        raise DatasetError(f"{path}: header needs at least one feature column")
    expected_tail = ["label", "subclass"] if has_subclass else ["label"]
    if header[-n_tail:] != expected_tail:
        raise DatasetError(f"{path}: header must end with {','.join(expected_tail)}")
    d = len(header) - n_tail

    feats, labels, subs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            vals = [float(c) for c in row[:d]]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: non-numeric feature ({exc})") from None
        if not all(np.isfinite(vals)):
            raise DatasetError(f"{path}: line {lineno}: non-finite feature value")
        feats.append(vals)
        labels.append(row[d].strip())
        if has_subclass:
            subs.append(row[d + 1].strip())
    if not feats:
        raise DatasetError(f"{path}: no data rows")

    y, classes = _dense_index(labels)
    s, subclasses = (None, None)
    if has_subclass:
        s, subclasses = _dense_index(subs)
    return Dataset(
        np.array(feats, dtype=np.float64),
        y,
        len(classes),
        s,
        None if subclasses is None else len(subclasses),
    )


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(ds.dim)] + ["label"]
    if ds.has_subclass:
        header.append("subclass")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.X[i]] + [str(int(ds.y[i]))]
            if ds.has_subclass:
                row.append(str(int(ds.subclass[i])))
            w.writerow(row)


# --------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class BlobConfig:
    original_class_count: int = 4
    subclusters_per_class: int = 1
    dim: int = 2
    per_class_count: int = 100
    center_spread: float = 10.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if self.original_class_count < 2:
            raise DatasetError("original_class_count must be >= 2")
        if self.subclusters_per_class < 1:
            raise DatasetError("subclusters_per_class must be >= 1")
        if self.dim < 2:
            raise DatasetError("dim must be >= 2")
        if self.per_class_count < 1:
            raise DatasetError("per_class_count must be >= 1")
        if not (self.noise_sigma > 0 and self.center_spread > self.noise_sigma):
            raise DatasetError("need center_spread > noise_sigma > 0")


def generate_blobs(cfg: BlobConfig, seed: int) -> Dataset:
    """Gaussian blobs around uniformly placed subcluster centers.

    Each class owns ``subclusters_per_class`` centers drawn in the cube
    ``[-spread/2, spread/2]^dim``; its points are spread round-robin over
    those centers. The subcluster index is not stored (use
    :func:`make_superclass_dataset` for labeled subclasses).
    """
    rng = np.random.default_rng(seed)
    C, K = cfg.original_class_count, cfg.subclusters_per_class
    centers = rng.uniform(-cfg.center_spread / 2, cfg.center_spread / 2, size=(C, K, cfg.dim))
    Xs, ys = [], []
    for c in range(C):
        which = np.arange(cfg.per_class_count) % K
        noise = rng.normal(0.0, cfg.noise_sigma, size=(cfg.per_class_count, cfg.dim))
        Xs.append(centers[c, which] + noise)
        ys.append(np.full(cfg.per_class_count, c))
    return Dataset(np.concatenate(Xs), np.concatenate(ys), C)


def make_superclass_dataset(ds: Dataset, seed: int) -> Dataset:
    """Randomly fold the classes of ``ds`` into two superclasses.

    Each original class goes to superclass 0 or 1 with probability 1/2;
    assignments that leave a side empty are redrawn. The original label is
    kept as the subclass.
    """
    if ds.class_count < 2:
        raise DatasetError("superclass construction needs at least 2 classes")
    if ds.has_subclass:
        raise DatasetError("dataset already carries subclass labels")
    rng = np.random.default_rng(seed)
    while True:
        assign = rng.integers(0, 2, size=ds.class_count)
        if 0 < assign.sum() < ds.class_count:
            break
    return Dataset(ds.X, assign[ds.y], 2, ds.y.copy(), ds.class_count)


# ---------------------------------------------------------- split/scaling


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: per class, ``floor(fraction * count)`` rows go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.y == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DatasetError(f"class {c} has fewer than 2 instances; cannot stratify")
        idx = rng.permutation(idx)
        k = int(np.floor(train_fraction * len(idx)))
        tr.append(idx[:k])
        te.append(idx[k:])
    tr_idx = np.sort(np.concatenate(tr))
    te_idx = np.sort(np.concatenate(te))
    if len(tr_idx) == 0 or len(te_idx) == 0:
        raise DatasetError("split leaves one side empty")
    return ds.subset(tr_idx), ds.subset(te_idx)


@dataclass(frozen=True)
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray  # 1.0 where the train column is constant

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) * self.std + self.mean


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, StandardizeStats]:
    if len(train) == 0:
        raise DatasetError("cannot standardize with an empty training set")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    stats = StandardizeStats(mean, std)
    return train.with_features(stats.apply(train.X)), test.with_features(stats.apply(test.X)), stats
