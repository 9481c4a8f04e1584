"""Top-k accuracy, per-class recall, confusion matrices and feature export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, write_csv_dataset


def _check(logits, labels):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    return logits, labels


def ranked_classes(logits) -> np.ndarray:
    """Class indices sorted by decreasing logit; ties keep the smaller index first."""
    return np.argsort(-np.atleast_2d(logits), axis=1, kind="stable")


def topk_accuracy(logits, labels, k: int) -> float:
    logits, labels = _check(logits, labels)
    c = logits.shape[1]
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    if len(labels) == 0:
        return float("nan")
    top = ranked_classes(logits)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def predictions(logits) -> np.ndarray:
    return ranked_classes(logits)[:, 0]


def confusion_matrix(logits, labels, num_classes: Optional[int] = None) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    logits, labels = _check(logits, labels)
    c = num_classes or logits.shape[1]
    out = np.zeros((c, c), dtype=np.int64)
    np.add.at(out, (labels, predictions(logits)), 1)
    return out


def per_class_recall(logits, labels, num_classes: Optional[int] = None) -> np.ndarray:
    """``correct_c / count_c``; NaN for classes with no samples."""
    cm = confusion_matrix(logits, labels, num_classes)
    return recall_from_confusion(cm)


def recall_from_confusion(cm) -> np.ndarray:
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def _nan_to_none(values):
    return [None if np.isnan(v) else float(v) for v in values]


@dataclass
class EvalSummary:
    topk: dict[int, float]
    class_recall: np.ndarray
    confusion: np.ndarray
    balanced_accuracy: float
    group_accuracy: dict[str, Optional[float]]

    def to_dict(self) -> dict:
        return {
            "topk": {str(k): self.topk[k] for k in sorted(self.topk)},
            "balanced_accuracy": self.balanced_accuracy,
            "class_recall": _nan_to_none(self.class_recall),
            "group_accuracy": {g: self.group_accuracy[g] for g in ("frequent", "rare")},
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def frequency_groups(train_counts) -> tuple[np.ndarray, np.ndarray]:
    """Split classes at the median training count: above it is frequent, the rest rare."""
    counts = np.asarray(train_counts, dtype=np.float64)
    frequent = counts > np.median(counts)
    return np.flatnonzero(frequent), np.flatnonzero(~frequent)


def evaluate(logits, labels, num_classes: int, train_counts=None, ks=(1,)) -> EvalSummary:
    logits, labels = _check(logits, labels)
    cm = confusion_matrix(logits, labels, num_classes)
    recall = recall_from_confusion(cm)
    present = ~np.isnan(recall)
    balanced = float(recall[present].mean()) if present.any() else float("nan")
    groups = {"frequent": None, "rare": None}
    if train_counts is not None:
        for name, members in zip(("frequent", "rare"), frequency_groups(train_counts)):
            support = cm[members].sum()
            if support:
                groups[name] = float(cm[members, members].sum() / support)
    return EvalSummary(
        topk={k: topk_accuracy(logits, labels, k) for k in ks},
        class_recall=recall,
        confusion=cm,
        balanced_accuracy=balanced,
        group_accuracy=groups,
    )


def dump_features(model, data: Dataset, path) -> Path:
    """Write penultimate representations as ``label,f1,...,fF`` CSV rows.

    ``model`` needs a ``penultimate(x)`` method; for a model without a hidden
    layer that returns the input features unchanged.
    """
    feats = np.atleast_2d(model.penultimate(data.features))
    path = Path(path)
    write_csv_dataset(Dataset(feats, data.labels, data.num_classes), path)
    return path
