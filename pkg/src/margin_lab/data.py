"""Imbalanced class-count profiles, synthetic blob datasets and CSV I/O.

Class index doubles as frequency rank: class 0 is the most frequent.
CSV layout is one sample per line, ``label,f1,...,fD``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .numerics import RandomSource


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise DatasetError(f"features must be an N x D matrix, got shape {f.shape}")
        if y.shape != (f.shape[0],):
            raise DatasetError(f"{f.shape[0]} feature rows but {y.shape} labels")
        if not np.all(np.isfinite(f)):
            raise DatasetError("features contain non-finite values")
        if np.any((y < 0) | (y >= self.num_classes)):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ImbalanceProfile:
    kind: Literal["longtail", "step"]
    n_max: int
    ratio: float
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("longtail", "step"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not self.ratio >= 1:
            raise ValueError(f"imbalance ratio must be >= 1, got {self.ratio}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")

    def counts(self) -> np.ndarray:
        return longtail_counts(self) if self.kind == "longtail" else step_counts(self)


def _round_half_up(x: float) -> int:
    return max(1, int(math.floor(x + 0.5)))


def longtail_counts(profile: ImbalanceProfile) -> np.ndarray:
    """Exponential decay ``n_max * ratio ** (-j / (C - 1))``."""
    if profile.kind != "longtail":
        raise ValueError("longtail_counts needs a longtail profile")
    c = profile.num_classes
    return np.array(
        [_round_half_up(profile.n_max * profile.ratio ** (-j / (c - 1))) for j in range(c)],
        dtype=np.int64,
    )


def step_counts(profile: ImbalanceProfile) -> np.ndarray:
    """First ceil(C/2) classes get ``n_max``, the rest ``n_max / ratio``."""
    if profile.kind != "step":
        raise ValueError("step_counts needs a step profile")
    c = profile.num_classes
    frequent = (c + 1) // 2
    rare = _round_half_up(profile.n_max / profile.ratio)
    return np.array([profile.n_max] * frequent + [rare] * (c - frequent), dtype=np.int64)


def subsample_to_counts(data: Dataset, target, rng: RandomSource) -> Dataset:
    """Keep a uniform random subset of ``target[c]`` rows per class, in original order."""
    target = np.asarray(target, dtype=np.int64)
    if len(target) != data.num_classes:
        raise DatasetError(f"target has {len(target)} classes, dataset has {data.num_classes}")
    have = data.counts
    short = np.flatnonzero(target > have)
    if short.size:
        c = int(short[0])
        raise DatasetError(f"class {c} has {have[c]} samples, {target[c]} requested")
    if np.any(target < 0):
        raise DatasetError("target counts must be nonnegative")
    keep = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        keep.append(idx[rng.choice(len(idx), int(target[c]))])
    keep = np.sort(np.concatenate(keep))
    return Dataset(data.features[keep], data.labels[keep], data.num_classes)


def class_means(num_classes: int, dims: int, separation: float) -> np.ndarray:
    """Class centres at distance ``separation`` from the origin.

    Two dimensions: evenly spaced on a circle. More: vertices of a regular
    simplex (needs ``dims >= num_classes - 1``), zero-padded.
    """
    if dims < 2:
        raise ValueError(f"dims must be >= 2, got {dims}")
    if dims == 2:
        angle = 2 * np.pi * np.arange(num_classes) / num_classes
        return separation * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    if dims < num_classes - 1:
        raise ValueError(f"{num_classes} simplex vertices need dims >= {num_classes - 1}, got {dims}")
    centred = np.eye(num_classes) - 1.0 / num_classes
    # orthonormal basis of the (C-1)-dim subspace holding the centred vertices
    u, _, _ = np.linalg.svd(centred.T, full_matrices=False)
    coords = centred @ u[:, : num_classes - 1]
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    means = np.zeros((num_classes, dims))
    means[:, : num_classes - 1] = coords
    return separation * means


def synth_gaussian_blobs(
    num_classes: int,
    dims: int,
    counts,
    separation: float,
    std: float,
    rng: RandomSource,
) -> Dataset:
    if not separation > 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != num_classes or np.any(counts < 0):
        raise ValueError(f"need {num_classes} nonnegative counts, got {counts.tolist()}")
    means = class_means(num_classes, dims, separation)
    feats = [means[c] + rng.normal((int(counts[c]), dims), 0.0, std) for c in range(num_classes)]
    labels = np.repeat(np.arange(num_classes), counts)
    return Dataset(np.concatenate(feats), labels, num_classes)


def write_csv_dataset(data: Dataset, path, header: bool = False) -> None:
    """Write ``label,f1,...`` rows; floats use shortest round-trip repr."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(",".join(["label"] + [f"f{i + 1}" for i in range(data.dims)]) + "\n")
        for label, row in zip(data.labels, data.features):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def load_csv_dataset(path, header: bool = False, num_classes: Optional[int] = None) -> Dataset:
    """Parse a ``label,f1,...,fD`` CSV file.

    ``num_classes`` defaults to ``max(label) + 1``. Problems are reported
    with 1-based line numbers.
    """
    labels, rows = [], []
    width = None
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, fields in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) < 2:
                raise DatasetError(f"row {lineno}: expected a label and at least one feature")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DatasetError(f"row {lineno}: expected {width - 1} features, got {len(fields) - 1}")
            try:
                label = int(fields[0])
            except ValueError:
                raise DatasetError(f"row {lineno}: label {fields[0]!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetError(f"row {lineno}: label {label} out of range")
            try:
                values = [float(f) for f in fields[1:]]
            except ValueError as exc:
                raise DatasetError(f"row {lineno}: non-numeric feature ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"row {lineno}: non-finite feature value")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no rows")
    if num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(np.array(rows), np.array(labels), num_classes)
