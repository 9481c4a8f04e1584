"""Class-balanced (effective number) weights and the deferred re-weighting schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import class_counts

DEFAULT_BETA = 0.9999


@dataclass(frozen=True)
class ReweightConfig:
    beta: float = DEFAULT_BETA
    defer_epoch: int = 160

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.defer_epoch < 0:
            raise ValueError(f"defer_epoch must be >= 0, got {self.defer_epoch}")


def effective_number_weights(counts, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Per-class weights ``(1 - beta) / (1 - beta**n)`` rescaled to mean one."""
    n = class_counts(counts).astype(np.float64)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        raw = np.ones_like(n)
    else:
        # 1 - beta**n without cancellation
        raw = (1.0 - beta) / -np.expm1(n * np.log1p(beta - 1.0))
    return raw * (len(n) / raw.sum())


def drw_sample_weights(epoch: int, labels, cfg: ReweightConfig, counts) -> np.ndarray:
    """Per-sample weights: ones before ``cfg.defer_epoch``, class-balanced from then on."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    n = class_counts(counts)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= len(n))):
        raise ValueError(f"label outside class range [0, {len(n)})")
    if epoch < cfg.defer_epoch:
        return np.ones(len(labels))
    return effective_number_weights(n, cfg.beta)[labels]
