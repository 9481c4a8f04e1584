"""Margin tables and the CE / LMSCE / LDAM / ELM losses with analytic gradients.

Every loss is available in two algebraically equivalent forms:

* the cross-entropy form, ``-log softmax(u)[y]`` on adjusted, scaled logits ``u``;
* the softplus form, ``softplus(s(z[c*] - z[y]) + margin + rho_hat)`` where
  ``c*`` is the strongest incorrect class and ``rho_hat`` aggregates the
  remaining non-target logits relative to it.

Functions accept a single logit vector ``z`` of shape ``(C,)`` with an integer
label, or a batch ``(N, C)`` with labels ``(N,)``. Batch inputs return array
fields in :class:`LossOutput`; single inputs return Python scalars.

Scale convention: by default all logits are multiplied by ``s`` (``u_k = s*z_k``)
so the two forms agree exactly. ``scale_mode="target_only"`` scales only the
adjusted target logit in the cross-entropy form, as the formulas are sometimes
printed; the softplus forms always scale every logit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional

import numpy as np

from .numerics import as_real_vector, sigmoid, softplus, stable_softmax

Variant = Literal["ce", "ldam", "elm"]
VARIANTS = ("ce", "ldam", "elm")
MARGIN_MODES = ("normalized", "literal")
SCALE_MODES = ("all", "target_only")

DEFAULT_MAX_MARGIN = 0.5
DEFAULT_SCALE = 30.0
DEFAULT_LAMBDA = 0.5


def class_counts(counts) -> np.ndarray:
    """Validate per-class sample counts: at least two classes, each >= 1."""
    arr = np.asarray(counts)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"need counts for at least 2 classes, got {arr.tolist()}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"class counts must be integers, got {arr.tolist()}")
    arr = arr.astype(np.int64)
    if np.any(arr < 1):
        raise ValueError(f"class counts must all be >= 1, got {arr.tolist()}")
    return arr


@dataclass(frozen=True)
class MarginTable:
    deltas: np.ndarray
    mode: str
    M: float

    def __post_init__(self):
        self.deltas.setflags(write=False)

    def __len__(self):
        return len(self.deltas)


def compute_margin_table(counts, M: float = DEFAULT_MAX_MARGIN, mode: str = "normalized") -> MarginTable:
    """Per-class margins proportional to ``n_j ** -1/4``.

    ``literal`` uses ``M / n_j**0.25``; ``normalized`` rescales so the rarest
    class gets exactly ``M``.
    """
    n = class_counts(counts)
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    if mode == "literal":
        deltas = M / n.astype(np.float64) ** 0.25
    elif mode == "normalized":
        deltas = M * (n.min() / n.astype(np.float64)) ** 0.25
    else:
        raise ValueError(f"unknown margin mode {mode!r}; expected one of {MARGIN_MODES}")
    return MarginTable(deltas=deltas, mode=mode, M=float(M))


@dataclass(frozen=True)
class LossConfig:
    """Loss selection and hyperparameters.

    ``lam`` and ``use_target_margin`` only affect ELM; ``margins`` is ignored
    by CE. ``use_target_margin=False`` gives the ELM variant without the
    target-class margin.
    """

    variant: Variant = "elm"
    s: float = DEFAULT_SCALE
    lam: float = DEFAULT_LAMBDA
    use_target_margin: bool = True
    margins: Optional[MarginTable] = None
    scale_mode: str = "all"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.s > 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}; expected one of {SCALE_MODES}")


@dataclass
class LossOutput:
    """Loss value, gradient w.r.t. the raw logits, and decomposition diagnostics.

    ``target_margin`` is the effective margin added inside the softplus
    argument (``s*Delta_y`` for LDAM, ``s*Delta_y - s*lam*Delta_c*`` for ELM,
    0 for CE).
    """

    loss: float | np.ndarray
    grad: np.ndarray
    c_star: int | np.ndarray
    rho_hat: float | np.ndarray
    target_margin: float | np.ndarray


class BatchLoss(NamedTuple):
    loss: float
    per_sample: LossOutput
    grad: np.ndarray  # per-sample gradients scaled by w_i / sum(w)


def _prepare(z, y, min_classes: int = 1):
    z = as_real_vector(z, "logits")
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.ndim != 2:
        raise ValueError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    n, c = z2.shape
    if c < min_classes:
        raise ValueError(f"need at least {min_classes} classes, got {c}")
    y1 = np.atleast_1d(np.asarray(y))
    if y1.ndim != 1 or y1.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {np.shape(y)}")
    if not np.issubdtype(y1.dtype, np.integer):
        raise ValueError("labels must be integers")
    if np.any((y1 < 0) | (y1 >= c)):
        raise ValueError(f"label out of range [0, {c})")
    return z2, y1.astype(np.int64), single


def _finish(single: bool, loss, grad, c_star, rho, margin) -> LossOutput:
    if single:
        return LossOutput(float(loss[0]), grad[0], int(c_star[0]), float(rho[0]), float(margin[0]))
    return LossOutput(loss, grad, c_star, rho, margin)


def _rows(n):
    return np.arange(n)


def _strongest_incorrect(z2: np.ndarray, y: np.ndarray) -> np.ndarray:
    """argmax over c != y; np.argmax picks the smallest index among ties."""
    masked = z2.copy()
    masked[_rows(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def _bias_margin(u: np.ndarray, y: np.ndarray, c_star: np.ndarray):
    """rho_hat = log sum_{c != y} exp(u_c - u_c*), plus the normalized weights.

    Returns ``(rho_hat, q)`` where ``q`` is the softmax over non-target
    entries (zero at ``y``).
    """
    rows = _rows(len(y))
    e = np.exp(u - u[rows, c_star][:, None])
    e[rows, y] = 0.0
    e[rows, c_star] = 0.0
    rest = e.sum(axis=1)
    rho = np.log1p(rest)
    e[rows, c_star] = 1.0
    q = e / (1.0 + rest)[:, None]
    return rho, q


def _neg_log_softmax(u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """-log softmax(u)[y] with the dominant term factored out."""
    rows = _rows(len(y))
    top_idx = np.argmax(u, axis=1)
    top = u[rows, top_idx]
    e = np.exp(u - top[:, None])
    e[rows, top_idx] = 0.0
    return (top - u[rows, y]) + np.log1p(e.sum(axis=1))


def _softmax_minus_onehot(u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """softmax(u) - onehot(y), with the target entry taken as -sum of the others.

    Avoids ``p_y - 1`` cancelling to zero when ``p_y`` rounds to one.
    """
    rows = _rows(len(y))
    p = stable_softmax(u, axis=1)
    p[rows, y] = 0.0
    p[rows, y] = -p.sum(axis=1)
    return p


def _onehot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(y), c))
    out[_rows(len(y)), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# Plain softmax cross entropy and its softplus decomposition
# ---------------------------------------------------------------------------


def ce_loss(z, y) -> LossOutput:
    """Softmax cross entropy ``log(1 + sum_{c!=y} exp(z_c - z_y))``."""
    z2, y1, single = _prepare(z, y)
    loss = _neg_log_softmax(z2, y1)
    grad = _softmax_minus_onehot(z2, y1)
    if z2.shape[1] >= 2:
        c_star = _strongest_incorrect(z2, y1)
        rho, _ = _bias_margin(z2, y1, c_star)
    else:
        c_star = np.full(len(y1), -1)
        rho = np.zeros(len(y1))
    return _finish(single, loss, grad, c_star, rho, np.zeros(len(y1)))


def lmsce_decompose(z, y) -> LossOutput:
    """Cross entropy rewritten as ``softplus(z[c*] - z[y] + rho_hat)``.

    The gradient is derived from this form independently of :func:`ce_loss`.
    """
    z2, y1, single = _prepare(z, y, min_classes=2)
    rows = _rows(len(y1))
    c_star = _strongest_incorrect(z2, y1)
    rho, q = _bias_margin(z2, y1, c_star)
    arg = z2[rows, c_star] - z2[rows, y1] + rho
    loss = softplus(arg)
    grad = sigmoid(arg)[:, None] * (q - _onehot(y1, z2.shape[1]))
    return _finish(single, np.atleast_1d(loss), grad, c_star, rho, np.zeros(len(y1)))


# ---------------------------------------------------------------------------
# Margin losses
# ---------------------------------------------------------------------------


def _require_margins(cfg: LossConfig, c: int) -> np.ndarray:
    if cfg.margins is None:
        raise ValueError(f"{cfg.variant} loss needs a margin table")
    deltas = np.asarray(cfg.margins.deltas)
    if len(deltas) != c:
        raise ValueError(f"margin table has {len(deltas)} classes, logits have {c}")
    return deltas


def _target_shift(z2, y1, cfg: LossConfig, variant: str):
    """Additive shift applied to z[y] before scaling, and the c* used for it."""
    deltas = _require_margins(cfg, z2.shape[1])
    c_star = _strongest_incorrect(z2, y1)
    if variant == "ldam":
        shift = -deltas[y1]
    else:
        shift = lam_shift = cfg.lam * deltas[c_star]
        if cfg.use_target_margin:
            shift = lam_shift - deltas[y1]
    return shift, c_star


def _margin_ce_form(z2, y1, cfg: LossConfig, shift, c_star):
    rows = _rows(len(y1))
    s = cfg.s
    if cfg.scale_mode == "all":
        u = s * z2
    else:
        u = z2.copy()
    u[rows, y1] = s * (z2[rows, y1] + shift)
    loss = _neg_log_softmax(u, y1)
    dlu = _softmax_minus_onehot(u, y1)
    if cfg.scale_mode == "all":
        grad = s * dlu
    else:
        grad = dlu
        grad[rows, y1] *= s
    rho, _ = _bias_margin(s * z2, y1, c_star)
    return loss, grad, rho, -s * shift


def _margin_softplus_form(z2, y1, cfg: LossConfig, shift, c_star):
    rows = _rows(len(y1))
    s = cfg.s
    rho, q = _bias_margin(s * z2, y1, c_star)
    margin = -s * shift
    arg = s * (z2[rows, c_star] - z2[rows, y1]) + margin + rho
    loss = np.atleast_1d(softplus(arg))
    grad = (s * sigmoid(arg))[:, None] * (q - _onehot(y1, z2.shape[1]))
    return loss, grad, rho, margin


def ldam_loss(z, y, cfg: LossConfig) -> LossOutput:
    """LDAM in cross-entropy form: the target logit is lowered by Delta_y, then scaled by s."""
    z2, y1, single = _prepare(z, y, min_classes=2)
    shift, c_star = _target_shift(z2, y1, cfg, "ldam")
    loss, grad, rho, margin = _margin_ce_form(z2, y1, cfg, shift, c_star)
    return _finish(single, loss, grad, c_star, rho, margin)


def ldam_softplus(z, y, cfg: LossConfig) -> LossOutput:
    """LDAM as ``softplus(s(z[c*] - z[y]) + s*Delta_y + rho_hat)``."""
    z2, y1, single = _prepare(z, y, min_classes=2)
    shift, c_star = _target_shift(z2, y1, cfg, "ldam")
    loss, grad, rho, margin = _margin_softplus_form(z2, y1, cfg, shift, c_star)
    return _finish(single, loss, grad, c_star, rho, margin)


def elm_loss(z, y, cfg: LossConfig) -> LossOutput:
    """ELM in cross-entropy form.

    The target logit becomes ``s(z_y - Delta_y + lam * Delta_c*)``. The
    choice of ``c*`` is treated as constant when differentiating.
    """
    z2, y1, single = _prepare(z, y, min_classes=2)
    shift, c_star = _target_shift(z2, y1, cfg, "elm")
    loss, grad, rho, margin = _margin_ce_form(z2, y1, cfg, shift, c_star)
    return _finish(single, loss, grad, c_star, rho, margin)


def elm_softplus(z, y, cfg: LossConfig) -> LossOutput:
    """ELM as ``softplus(s(z[c*] - z[y]) + s*Delta_y - s*lam*Delta_c* + rho_hat)``."""
    z2, y1, single = _prepare(z, y, min_classes=2)
    shift, c_star = _target_shift(z2, y1, cfg, "elm")
    loss, grad, rho, margin = _margin_softplus_form(z2, y1, cfg, shift, c_star)
    return _finish(single, loss, grad, c_star, rho, margin)


def compute_loss(z, y, cfg: LossConfig) -> LossOutput:
    """Cross-entropy form of the configured variant.

    CE is evaluated on ``s * z`` so that all variants see the same logit
    scale; use ``s=1`` for unscaled softmax cross entropy.
    """
    if cfg.variant == "ldam":
        return ldam_loss(z, y, cfg)
    if cfg.variant == "elm":
        return elm_loss(z, y, cfg)
    out = ce_loss(cfg.s * as_real_vector(z, "logits"), y)
    out.grad = cfg.s * out.grad
    return out


def batch_loss(zs, ys, weights, cfg: LossConfig) -> BatchLoss:
    """Weighted mean ``sum(w_i * L_i) / sum(w_i)`` over a batch."""
    zs = np.atleast_2d(as_real_vector(zs, "logits"))
    ys = np.asarray(ys)
    w = as_real_vector(weights, "weights")
    if not (len(zs) == len(ys) == len(w)):
        raise ValueError(f"length mismatch: {len(zs)} logits, {len(ys)} labels, {len(w)} weights")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights are all zero")
    out = compute_loss(zs, ys, cfg)
    norm = w / total
    return BatchLoss(float(np.dot(norm, out.loss)), out, out.grad * norm[:, None])
