"""Margin-based losses for class-imbalanced classification.

Softmax cross entropy, its softplus decomposition, LDAM and ELM in both
cross-entropy and softplus forms, plus the data, reweighting and training
pieces needed to exercise them on small problems.
"""

from .losses import (
    LossConfig,
    LossOutput,
    MarginTable,
    batch_loss,
    ce_loss,
    compute_loss,
    compute_margin_table,
    elm_loss,
    elm_softplus,
    ldam_loss,
    ldam_softplus,
    lmsce_decompose,
)
from .numerics import RandomSource, log_sum_exp, softplus, stable_softmax
from .reweighting import ReweightConfig, drw_sample_weights, effective_number_weights

__all__ = [
    "LossConfig",
    "LossOutput",
    "MarginTable",
    "RandomSource",
    "ReweightConfig",
    "batch_loss",
    "ce_loss",
    "compute_loss",
    "compute_margin_table",
    "drw_sample_weights",
    "effective_number_weights",
    "elm_loss",
    "elm_softplus",
    "ldam_loss",
    "ldam_softplus",
    "lmsce_decompose",
    "log_sum_exp",
    "softplus",
    "stable_softmax",
]
