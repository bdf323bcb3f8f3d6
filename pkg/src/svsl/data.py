"""Datasets: synthetic Gaussian mixtures, IDX and CSV readers, normalisation."""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import ContractError, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ContractError(f"X {self.X.shape} and y {self.y.shape} do not align")
        if self.y.size == 0:
            raise ContractError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass
class GaussianMixtureSpec:
    centers: np.ndarray  # (C, d)
    sigma: Sequence[float] | float
    n_train_per_class: int
    n_test_per_class: int
    seed: int = 0

    @classmethod
    def random_centers(cls, num_classes: int, dim: int, sigma: float, n_train_per_class: int,
                       n_test_per_class: int, seed: int = 0, radius: float = 1.0):
        """Centers drawn uniformly on the sphere of ``radius`` (from its own sub-seed)."""
        rng = make_rng(seed)
        c = rng.standard_normal((num_classes, dim))
        c *= radius / np.linalg.norm(c, axis=1, keepdims=True)
        return cls(c, sigma, n_train_per_class, n_test_per_class, seed)


def generate_gaussian_mixture(spec: GaussianMixtureSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits, each with exact per-class counts, rows grouped by class."""
    centers = np.asarray(spec.centers, dtype=np.float64)
    C, d = centers.shape
    sigma = np.broadcast_to(np.asarray(spec.sigma, dtype=np.float64), (C,))
    if np.any(sigma <= 0):
        raise ContractError("sigma must be positive")
    if len(np.unique(centers, axis=0)) < C:
        warnings.warn("duplicate class centers: classes overlap completely", stacklevel=2)
    ss = np.random.SeedSequence(int(spec.seed))
    train_ss, test_ss = ss.spawn(2)
    out = []
    for split, sub, n in (("train", train_ss, spec.n_train_per_class),
                          ("test", test_ss, spec.n_test_per_class)):
        rng = np.random.Generator(np.random.PCG64(sub))
        X = np.concatenate([centers[c] + sigma[c] * rng.standard_normal((n, d)) for c in range(C)])
        y = np.repeat(np.arange(C), n)
        out.append(Dataset(X, y, C, split))
    return out[0], out[1]


# -- IDX -------------------------------------------------------------------

def _header(raw: bytes, n_fields: int, path) -> tuple[int, ...]:
    need = 4 * n_fields
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0, need {need}")
    return struct.unpack_from(f">{n_fields}I", raw, 0)


def read_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, = _header(raw, 1, path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    _, n, rows, cols = _header(raw, 4, path)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated pixel data, file ends at offset {len(raw)}, need {need}")
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes at offset {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, = _header(raw, 1, path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    _, n = _header(raw, 2, path)
    need = 8 + n
    if len(raw) != need:
        kind = "truncated label data" if len(raw) < need else "trailing bytes"
        raise DataFormatError(f"{path}: {kind}, file ends at offset {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def read_idx(images_path, labels_path, split: str = "train",
             num_classes: Optional[int] = None) -> Dataset:
    """Images scaled to [0, 1] and flattened to ``rows * cols`` features."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds "
            f"{labels.shape[0]} labels (count field at offset 4)")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    C = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(X, labels.astype(np.int64), C, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# -- CSV -------------------------------------------------------------------

def read_csv(path, label_column: int | str = -1, header: bool = False,
             split: str = "train") -> Dataset:
    """Numeric table; ``label_column`` is an index or (with ``header``) a name."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(cell.strip() for cell in r)]
    if header:
        if not rows:
            raise DataFormatError(f"{path}: empty file")
        names, rows = rows[0], rows[1:]
        if isinstance(label_column, str):
            if label_column not in names:
                raise DataFormatError(f"{path}: no column named {label_column!r}")
            label_column = names.index(label_column)
    elif isinstance(label_column, str):
        raise DataFormatError("a named label column requires header=True")
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    width = len(rows[0])
    first_line = 2 if header else 1
    values = []
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataFormatError(f"{path}: row {i + first_line} has {len(r)} fields, expected {width}")
        try:
            values.append([float(c) for c in r])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {i + first_line}: {exc}") from None
    table = np.array(values)
    col = label_column % width
    raw_labels = table[:, col]
    if np.any(raw_labels != np.round(raw_labels)):
        bad = int(np.flatnonzero(raw_labels != np.round(raw_labels))[0])
        raise DataFormatError(f"{path}: row {bad + first_line}: non-integer label {raw_labels[bad]}")
    labels = raw_labels.astype(np.int64)
    if labels.min() < 0:
        bad = int(np.argmin(labels))
        raise DataFormatError(f"{path}: row {bad + first_line}: negative label {labels[bad]}")
    C = int(labels.max()) + 1
    present = np.bincount(labels, minlength=C)
    if np.any(present == 0):
        missing = np.flatnonzero(present == 0).tolist()
        raise DataFormatError(f"{path}: labels leave gaps, classes {missing} never occur")
    if C < 2:
        raise DataFormatError(f"{path}: only one class present, classification needs at least 2")
    X = np.delete(table, col, axis=1)
    return Dataset(X, labels, C, split)


# -- normalisation ---------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        return Dataset((ds.X - self.mean) / self.std, ds.y.copy(), ds.num_classes, ds.split)


def normalize_mean_std(train: Dataset, *others: Dataset) -> tuple[list[Dataset], NormStats]:
    """Standardise every split with the train split's per-feature mean and std.

    Constant train features get std 1, so they map to zero.
    """
    constant = np.ptp(train.X, axis=0) == 0
    # pin constant features to their exact value so they map to exact zeros
    mean = np.where(constant, train.X[0], train.X.mean(axis=0))
    std = np.where(constant, 1.0, train.X.std(axis=0))
    stats = NormStats(mean, std)
    return [stats.apply(ds) for ds in (train, *others)], stats
