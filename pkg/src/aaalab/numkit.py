"""Small deterministic numeric substrate: softmax, top-2, Adam, seeded streams."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives input outside its contract."""


def as_realvec(v, name: str = "input") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(v) -> np.ndarray:
    """Max-shifted softmax of a finite, non-empty vector."""
    z = as_realvec(v)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array (no validation; hot path)."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def top2(v) -> tuple[int, float, int, float]:
    """Largest and runner-up entries as ``(i1, v1, i2, v2)``.

    Ties go to the lowest index, so ``top2([5, 5, 2]) == (0, 5.0, 1, 5.0)``.
    """
    z = as_realvec(v)
    if z.size < 2:
        raise InvalidInputError("top2 needs at least two entries")
    i1 = int(np.argmax(z))  # argmax returns the first maximal index
    rest = z.copy()
    rest[i1] = -np.inf
    i2 = int(np.argmax(rest))
    return i1, float(z[i1]), i2, float(z[i2])


def top2_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-2 indices with lowest-index tie-breaking."""
    rows = np.arange(z.shape[0])
    i1 = np.argmax(z, axis=1)
    rest = z.copy()
    rest[rows, i1] = -np.inf
    i2 = np.argmax(rest, axis=1)
    return i1, i2


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grad) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not modified. Works for any array shape as long as params,
    grad and both moment buffers agree.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise InvalidInputError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}/{state.v.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


class RngStream:
    """Counter-based (Philox) random stream keyed by a seed and an optional path.

    ``RngStream(seed, key=(i, j))`` gives the stream for item ``(i, j)``
    under a master seed; different keys are statistically independent and a
    given ``(seed, key)`` reproduces the same sequence on every platform.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    # thin pass-throughs used across the package
    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def choice_sign(self, size):
        return np.where(self.gen.random(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
