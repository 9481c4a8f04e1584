"""Numerically stable primitives and the seeded random source.

Everything works in float64. Vector functions accept 1-D arrays and, where
noted, 2-D arrays reduced along the last axis.
"""

from __future__ import annotations

import numpy as np

# Beyond this, softplus is replaced by its asymptote (error below e^-30).
SOFTPLUS_CUTOFF = 30.0


def as_real_vector(values, name: str = "vector") -> np.ndarray:
    """Return ``values`` as a finite float64 array or raise ``ValueError``."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def softplus(x):
    """log(1 + e^x), piecewise so it never overflows.

    Accepts a scalar or an array; returns the same shape.
    """
    arr = as_real_vector(x, "softplus input")
    out = np.empty_like(arr)
    hi = arr > SOFTPLUS_CUTOFF
    lo = arr < -SOFTPLUS_CUTOFF
    mid = ~(hi | lo)
    out[hi] = arr[hi]
    out[lo] = np.exp(arr[lo])
    out[mid] = np.log1p(np.exp(arr[mid]))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid(x):
    """Logistic function, the derivative of softplus."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def log_sum_exp(v, axis: int = -1):
    """max(v) + log(sum(exp(v - max(v)))) along ``axis``.

    The largest term is pulled out and the rest summed through ``log1p``
    so that a dominant entry does not wash out the small remainder.
    """
    arr = as_real_vector(v, "log_sum_exp input")
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    arr = np.moveaxis(arr, axis, -1)
    idx = np.argmax(arr, axis=-1)
    top = np.take_along_axis(arr, idx[..., None], axis=-1)
    shifted = np.exp(arr - top)
    np.put_along_axis(shifted, idx[..., None], 0.0, axis=-1)
    out = top[..., 0] + np.log1p(shifted.sum(axis=-1))
    if out.ndim == 0:
        return float(out)
    return out


def stable_softmax(v, axis: int = -1) -> np.ndarray:
    arr = as_real_vector(v, "softmax input")
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(arr - arr.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class RandomSource:
    """Seeded stream of pseudo-random draws.

    Backed by numpy's Philox4x64 counter-based bit generator keyed from
    ``SeedSequence([seed, *path])``, so any implementation of Philox with
    the same key derivation reproduces the stream. Child streams are
    derived with :meth:`child` rather than by sharing one instance.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence([self.seed, *self.path])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "RandomSource":
        return RandomSource(self.seed, self.path + tuple(keys))

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        return mean + std * self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        return self.generator.choice(n, size=size, replace=False)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)


def draw_normal(rng: RandomSource, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``n`` normal draws from ``rng``."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    return rng.normal(n, mean, std)
