"""Randomized property suites: form equivalence, reductions and gradient audits.

Cases are drawn in blocks that share a class count, scale, lambda and margin
table, so each loss call is vectorized over the block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .losses import (
    LossConfig,
    MarginTable,
    ce_loss,
    compute_margin_table,
    elm_loss,
    elm_softplus,
    ldam_loss,
    ldam_softplus,
    lmsce_decompose,
)
from .numerics import RandomSource

SCALES = (1.0, 10.0, 30.0)
LAMBDAS = (0.0, 0.1, 0.5, 1.0, 1.2)
LOGIT_STD = 3.0
BLOCK = 50
TIE_GAP = 1e-3

EQUIVALENCE_TOL = 1e-9
LMSCE_TOL = 1e-10
REDUCTION_TOL = 1e-12
GRADIENT_TOL = 1e-4
MODEL_GRADIENT_TOL = 1e-3


@dataclass
class Block:
    z: np.ndarray
    y: np.ndarray
    cfg: LossConfig


def random_blocks(
    trials: int,
    rng: RandomSource,
    min_classes: int = 2,
    max_classes: int = 100,
) -> Iterator[Block]:
    """Yield blocks totalling exactly ``trials`` random cases."""
    left = trials
    while left > 0:
        n = min(BLOCK, left)
        c = int(rng.integers(min_classes, max_classes + 1))
        counts = rng.integers(1, 5001, size=c)
        mode = ("normalized", "literal")[int(rng.integers(0, 2))]
        margins = compute_margin_table(counts, M=float(rng.uniform(0.1, 1.0)), mode=mode)
        cfg = LossConfig(
            variant="elm",
            s=SCALES[int(rng.integers(0, len(SCALES)))],
            lam=LAMBDAS[int(rng.integers(0, len(LAMBDAS)))],
            use_target_margin=bool(rng.integers(0, 2)),
            margins=margins,
        )
        z = rng.normal((n, c), 0.0, LOGIT_STD)
        y = rng.integers(0, c, size=n)
        yield Block(z, y, cfg)
        left -= n


def equivalence_suite(trials: int = 100_000, seed: int = 0, scale_mode: str = "all") -> dict:
    """Max |CE form - softplus form| per variant.

    With ``scale_mode="target_only"`` the cross-entropy forms scale only the
    target logit, and the reported gap measures how far that reading is
    from the softplus forms.
    """
    worst = {"lmsce": 0.0, "ldam": 0.0, "elm": 0.0}
    for b in random_blocks(trials, RandomSource(seed)):
        cfg = LossConfig(
            variant="elm", s=b.cfg.s, lam=b.cfg.lam, use_target_margin=b.cfg.use_target_margin,
            margins=b.cfg.margins, scale_mode=scale_mode,
        )
        pairs = {
            "lmsce": (ce_loss(b.z, b.y).loss, lmsce_decompose(b.z, b.y).loss),
            "ldam": (ldam_loss(b.z, b.y, cfg).loss, ldam_softplus(b.z, b.y, cfg).loss),
            "elm": (elm_loss(b.z, b.y, cfg).loss, elm_softplus(b.z, b.y, cfg).loss),
        }
        for name, (a, s) in pairs.items():
            worst[name] = max(worst[name], float(np.max(np.abs(a - s))))
    return {name: {"trials": trials, "max_abs_diff": v} for name, v in worst.items()}


def reduction_suite(trials: int = 10_000, seed: int = 1) -> dict:
    """ELM with lambda=0 against LDAM, and zero-margin unit-scale LDAM against CE."""
    elm_vs_ldam = ldam_vs_ce = 0.0
    for b in random_blocks(trials, RandomSource(seed)):
        cfg = LossConfig(variant="elm", s=b.cfg.s, lam=0.0, use_target_margin=True, margins=b.cfg.margins)
        elm_vs_ldam = max(elm_vs_ldam, float(np.max(np.abs(elm_loss(b.z, b.y, cfg).loss - ldam_loss(b.z, b.y, cfg).loss))))
        zero = MarginTable(np.zeros(b.z.shape[1]), "literal", 1.0)
        plain = LossConfig(variant="ldam", s=1.0, margins=zero)
        ldam_vs_ce = max(ldam_vs_ce, float(np.max(np.abs(ldam_loss(b.z, b.y, plain).loss - ce_loss(b.z, b.y).loss))))
    return {
        "elm_lambda0_vs_ldam": {"trials": trials, "max_abs_diff": elm_vs_ldam},
        "ldam_zero_margin_vs_ce": {"trials": trials, "max_abs_diff": ldam_vs_ce},
    }


def _loss_fn(variant: str) -> Callable:
    if variant == "ce":
        return lambda z, y, cfg: ce_loss(z, y)
    if variant == "ldam":
        return ldam_loss
    if variant == "elm":
        return elm_loss
    raise ValueError(f"unknown variant {variant!r}")


def incorrect_gap(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gap between the two largest incorrect logits per row (inf with one incorrect class)."""
    masked = z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    top2 = -np.sort(-masked, axis=1)[:, :2]
    if z.shape[1] < 3:
        return np.full(len(y), np.inf)
    return top2[:, 0] - top2[:, 1]


def finite_difference_grad(fn: Callable, z: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn(z, y) -> per-row losses`` in every logit."""
    grad = np.empty_like(z)
    for j in range(z.shape[1]):
        zp, zm = z.copy(), z.copy()
        zp[:, j] += h
        zm[:, j] -= h
        grad[:, j] = (fn(zp, y) - fn(zm, y)) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Row-wise ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.atleast_2d(analytic).reshape(len(np.atleast_2d(analytic)), -1)
    n = np.atleast_2d(numeric).reshape(a.shape)
    scale = np.maximum(np.abs(a).max(axis=1), np.abs(n).max(axis=1))
    diff = np.abs(a - n).max(axis=1)
    return np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)


def gradient_suite(
    trials: int = 10_000,
    seed: int = 2,
    h: float = 1e-5,
    variants=("ce", "ldam", "elm"),
) -> dict:
    """Finite-difference audit of analytic logit gradients, skipping near-ties in c*."""
    report = {}
    for v_idx, variant in enumerate(variants):
        fn = _loss_fn(variant)
        worst, done, skipped = 0.0, 0, 0
        rng = RandomSource(seed).child(v_idx)
        while done < trials:
            for b in random_blocks(trials - done, rng):
                keep = incorrect_gap(b.z, b.y) > TIE_GAP
                skipped += int((~keep).sum())
                z, y = b.z[keep], b.y[keep]
                if len(y) == 0:
                    continue
                cfg = b.cfg
                analytic = fn(z, y, cfg).grad
                numeric = finite_difference_grad(lambda zz, yy: fn(zz, yy, cfg).loss, z, y, h)
                worst = max(worst, float(relative_error(analytic, numeric).max()))
                done += len(y)
        report[variant] = {"trials": done, "worst_rel_err": worst, "skipped_near_ties": skipped}
    return report


def model_gradient_audit(seed: int = 3, h: float = 1e-5) -> dict:
    """Perturb every parameter of tiny models and compare with backprop.

    Covers linear and cosine heads, with and without a hidden layer, under
    ELM loss and non-uniform sample weights.
    """
    from .losses import batch_loss
    from .trainer import _forward_cached, backward, init_model

    rng = RandomSource(seed)
    results = {}
    for hidden in (None, 4):
        for cosine in (False, True):
            params = init_model(3, 4, hidden, cosine, rng.child(0 if hidden is None else 1, int(cosine)))
            x = rng.normal((6, 3))
            y = rng.integers(0, 4, size=6)
            w = rng.uniform(0.2, 2.0, size=6)
            cfg = LossConfig(variant="elm", s=5.0, lam=0.5,
                             margins=compute_margin_table([40, 20, 10, 5], M=0.5))

            def loss_of(p):
                z, _ = _forward_cached(p, x)
                return batch_loss(z, y, w, cfg).loss

            z, cache = _forward_cached(params, x)
            grads = backward(params, cache, batch_loss(z, y, w, cfg).grad)
            worst = 0.0
            for name, arr in params.arrays().items():
                numeric = np.zeros_like(arr)
                for i in np.ndindex(arr.shape):
                    plus, minus = arr.copy(), arr.copy()
                    plus[i] += h
                    minus[i] -= h
                    # bypass renormalization so the perturbation is exact
                    p_plus = type(params)(**{**params.__dict__, name: plus})
                    p_minus = type(params)(**{**params.__dict__, name: minus})
                    numeric[i] = (loss_of(p_plus) - loss_of(p_minus)) / (2 * h)
                worst = max(worst, float(relative_error(grads[name].ravel()[None], numeric.ravel()[None])[0]))
            key = f"{'hidden' if hidden else 'linear'}-{'cosine' if cosine else 'affine'}"
            results[key] = worst
    return results
