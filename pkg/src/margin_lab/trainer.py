"""Deterministic training of small classifiers with the margin losses.

The model is an optional softplus hidden layer followed by a final classifier
that is either affine (``z = W h + b``) or cosine (``z_c = <w_c/|w_c|, h/|h|>``).
In cosine mode the loss applies the scale ``s``; forward never does.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .evaluation import EvalSummary, evaluate
from .losses import LossConfig, batch_loss
from .numerics import RandomSource, sigmoid, softplus
from .reweighting import ReweightConfig, drw_sample_weights

log = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


@dataclass
class ModelParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    hidden_weight: Optional[np.ndarray] = None
    hidden_bias: Optional[np.ndarray] = None
    cosine: bool = False

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dims(self) -> int:
        if self.hidden_weight is not None:
            return self.hidden_weight.shape[1]
        return self.weight.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        names = ("weight", "bias", "hidden_weight", "hidden_bias")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Copy with replaced arrays; cosine classifier rows are renormalized."""
        new = replace(self, **arrays)
        if new.cosine:
            new.weight = _unit_rows(new.weight)
        return new

    def penultimate(self, x) -> np.ndarray:
        x = self._check_input(x)
        if self.hidden_weight is None:
            return x
        return softplus(x @ self.hidden_weight.T + self.hidden_bias)

    def logits(self, x) -> np.ndarray:
        return forward(self, x)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dims:
            raise ValueError(f"expected {self.input_dims} input features, got {x.shape[-1]}")
        return x

    def to_dict(self) -> dict:
        out = {"cosine": self.cosine}
        for name, arr in self.arrays().items():
            out[name] = arr.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        get = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(get("weight"), get("bias"), get("hidden_weight"), get("hidden_bias"), bool(d["cosine"]))


def _unit_rows(w: np.ndarray) -> np.ndarray:
    return w / np.maximum(np.linalg.norm(w, axis=-1, keepdims=True), _NORM_FLOOR)


def init_model(
    dims: int,
    num_classes: int,
    hidden: Optional[int] = None,
    cosine: bool = False,
    rng: Optional[RandomSource] = None,
) -> ModelParams:
    """Normal init with std ``1/sqrt(fan_in)``; biases start at zero."""
    if dims < 1 or num_classes < 1 or (hidden is not None and hidden < 0):
        raise ValueError(f"invalid model dims D={dims}, C={num_classes}, H={hidden}")
    rng = rng or RandomSource(0)
    hidden = hidden or None
    hidden_w = hidden_b = None
    feat = dims
    if hidden:
        hidden_w = rng.normal((hidden, dims), 0.0, 1.0 / np.sqrt(dims))
        hidden_b = np.zeros(hidden)
        feat = hidden
    weight = rng.normal((num_classes, feat), 0.0, 1.0 / np.sqrt(feat))
    if cosine:
        return ModelParams(_unit_rows(weight), None, hidden_w, hidden_b, True)
    return ModelParams(weight, np.zeros(num_classes), hidden_w, hidden_b, False)


def _forward_cached(params: ModelParams, x: np.ndarray):
    cache = {"x": x}
    h = x
    if params.hidden_weight is not None:
        a = x @ params.hidden_weight.T + params.hidden_bias
        cache["a"] = a
        h = softplus(a)
    cache["h"] = h
    if params.cosine:
        h_norm = np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), _NORM_FLOOR)
        w_norm = np.maximum(np.linalg.norm(params.weight, axis=1, keepdims=True), _NORM_FLOOR)
        hn, wn = h / h_norm, params.weight / w_norm
        cache.update(h_norm=h_norm, w_norm=w_norm, hn=hn, wn=wn)
        z = hn @ wn.T
    else:
        z = h @ params.weight.T + params.bias
    return z, cache


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits for one feature vector ``(D,)`` or a batch ``(N, D)``."""
    x = params._check_input(x)
    return _forward_cached(params, x)[0]


def backward(params: ModelParams, cache: dict, grad_z: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dz for the batch."""
    grads = {}
    if params.cosine:
        hn, wn = cache["hn"], cache["wn"]
        d_wn = grad_z.T @ hn
        grads["weight"] = (d_wn - (d_wn * wn).sum(axis=1, keepdims=True) * wn) / cache["w_norm"]
        d_hn = grad_z @ wn
        d_h = (d_hn - (d_hn * hn).sum(axis=1, keepdims=True) * hn) / cache["h_norm"]
    else:
        grads["weight"] = grad_z.T @ cache["h"]
        grads["bias"] = grad_z.sum(axis=0)
        d_h = grad_z @ params.weight
    if params.hidden_weight is not None:
        d_a = d_h * sigmoid(cache["a"])
        grads["hidden_weight"] = d_a.T @ cache["x"]
        grads["hidden_bias"] = d_a.sum(axis=0)
    return grads


def default_milestones(epochs: int) -> tuple[int, ...]:
    """LR milestones at 80% and 90% of the run (160/180 of 200)."""
    marks = sorted({round(0.8 * epochs), round(0.9 * epochs)})
    return tuple(m for m in marks if 0 < m < epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    warmup_epochs: int = 5
    milestones: tuple[int, ...] = (160, 180)
    decay_factor: float = 0.01
    seed: int = 0
    loss: LossConfig = field(default_factory=lambda: LossConfig(variant="ce"))
    reweight: Optional[ReweightConfig] = None
    hidden: Optional[int] = None
    cosine: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            raise ValueError(f"milestones must lie in [0, {self.epochs}), got {ms}")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("base_lr, momentum and weight_decay must be nonnegative")
        object.__setattr__(self, "milestones", ms)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_epochs - 1``, then step decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.base_lr * cfg.decay_factor**passed


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One SGD update with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    ``params`` is a :class:`ModelParams` (cosine rows renormalized after any
    step with ``lr > 0``) or a plain dict of arrays. ``velocity`` may be ``None`` on the
    first step. Returns ``(params, velocity)``; inputs are not modified.
    """
    arrays = params.arrays() if isinstance(params, ModelParams) else params
    if set(grads) != set(arrays):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(arrays)}")
    velocity = velocity or {k: np.zeros_like(v, dtype=np.float64) for k, v in arrays.items()}
    new_p, new_v = {}, {}
    for name, p in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p) or velocity[name].shape != np.shape(p):
            raise ValueError(f"shape mismatch for {name}: param {np.shape(p)}, grad {g.shape}")
        v = momentum * velocity[name] + g + weight_decay * p
        new_v[name] = v
        new_p[name] = p - lr * v
    if isinstance(params, ModelParams):
        if lr == 0:
            # renormalizing already-unit rows would still move them by an ulp
            return replace(params, **new_p), new_v
        return params.with_arrays(new_p), new_v
    return new_p, new_v


@dataclass
class TrainState:
    params: ModelParams
    velocity: Optional[dict] = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    class_accuracy: list  # None for classes absent from the training set
    weighting: str  # "uniform" or "balanced"

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "class_accuracy": self.class_accuracy,
            "weighting": self.weighting,
        }


@dataclass
class RunReport:
    seed: int
    records: list[EpochRecord]
    final: Optional[EvalSummary] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": [r.to_dict() for r in self.records],
            "final": None if self.final is None else self.final.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _sample_weights(epoch, labels, cfg: TrainConfig, counts):
    if cfg.reweight is None:
        return np.ones(len(labels)), "uniform"
    w = drw_sample_weights(epoch, labels, cfg.reweight, counts)
    return w, ("balanced" if epoch >= cfg.reweight.defer_epoch else "uniform")


def train_epoch(state: TrainState, data: Dataset, epoch: int, cfg: TrainConfig):
    """One pass over a seeded permutation of ``data``. Returns ``(state, record)``."""
    lr = lr_at(epoch, cfg)
    counts = data.counts
    order = RandomSource(cfg.seed).child(1, epoch).permutation(len(data))
    params, velocity = state.params, state.velocity
    correct = np.zeros(data.num_classes)
    total_loss = 0.0
    weighting = "uniform"
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x, y = data.features[idx], data.labels[idx]
        z, cache = _forward_cached(params, x)
        w, weighting = _sample_weights(epoch, y, cfg, counts)
        out = batch_loss(z, y, w, cfg.loss)
        total_loss += out.loss * len(idx)
        np.add.at(correct, y, np.argmax(z, axis=1) == y)
        grads = backward(params, cache, out.grad)
        params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
    acc = [None if n == 0 else float(c / n) for c, n in zip(correct, counts)]
    record = EpochRecord(epoch, lr, total_loss / max(len(data), 1), acc, weighting)
    return TrainState(params, velocity), record


def _ks(num_classes: int) -> tuple[int, ...]:
    return tuple(k for k in (1, 3, 5) if k <= num_classes)


def train_run(data: Dataset, cfg: TrainConfig, eval_data: Optional[Dataset] = None):
    """Initialize, train for ``cfg.epochs`` and evaluate.

    The final summary is computed on ``eval_data`` (training data if omitted).
    Returns ``(params, report)``.
    """
    if cfg.loss.variant != "ce" and cfg.loss.margins is None:
        raise ValueError(f"{cfg.loss.variant} training needs a margin table in the loss config")
    params = init_model(data.dims, data.num_classes, cfg.hidden, cfg.cosine, RandomSource(cfg.seed).child(0))
    state = TrainState(params)
    records = []
    for epoch in range(cfg.epochs):
        state, rec = train_epoch(state, data, epoch, cfg)
        log.debug("epoch %d lr=%.3g loss=%.5f", epoch, rec.lr, rec.train_loss)
        records.append(rec)
    target = eval_data if eval_data is not None else data
    summary = evaluate(
        state.params.logits(target.features),
        target.labels,
        target.num_classes,
        train_counts=data.counts,
        ks=_ks(target.num_classes),
    )
    return state.params, RunReport(cfg.seed, records, summary)
