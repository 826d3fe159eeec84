"""Output post-processing defense, its loss pieces, temperature calibration and RND.

The post-processor pulls the unsupervised margin of each logit vector toward a
periodic attractor and reverses the loss trend inside every attractor
interval, so a greedy score-based attacker is steered away from the decision
boundary. A second term keeps the top-1 probability near its
temperature-scaled value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from aaalab import _kernels
from aaalab.metrics import ece
from aaalab.model import MlpWeights, forward
from aaalab.numkit import InvalidInputError, RngStream, as_realvec, softmax, top2

DEFAULT_TEMPERATURE_GRID = tuple(float(2.0 ** (k / 4)) for k in range(-8, 9))  # 0.25 .. 4.0


@dataclass(frozen=True)
class AaaConfig:
    t: float = 6.0  # attractor interval
    alpha: float = 1.0  # reverse step
    beta: float = 5.0  # calibration weight
    temperature: float = 1.0
    iterations: int = 100
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kappa: float = 1e-3  # floor on the target margin

    def __post_init__(self):
        if not (self.t > 0 and self.temperature > 0 and self.kappa > 0):
            raise InvalidInputError("t, temperature and kappa must be positive")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("alpha and beta must be non-negative")


def _check_class(z: np.ndarray, y) -> int:
    if not isinstance(y, (int, np.integer)) or not 0 <= y < z.size:
        raise InvalidInputError(f"class index {y!r} out of range for {z.size} logits")
    return int(y)


def margin_loss(z, y: int) -> float:
    """``z[y] - max_{k != y} z[k]``; negative exactly when ``y`` is not the argmax."""
    z = as_realvec(z, "logits")
    if z.size < 2:
        raise InvalidInputError("margin needs at least two logits")
    y = _check_class(z, y)
    return float(z[y] - np.max(np.delete(z, y)))


def unsupervised_margin_loss(z) -> float:
    """Margin against the model's own prediction (top-1 minus top-2)."""
    _, v1, _, v2 = top2(z)
    return v1 - v2


def closest_attractor(l0: float, t: float) -> float:
    """Attractor ``(ceil(l0 / t) - 1/2) * t`` of the interval holding ``l0``.

    Intervals are ``((k-1) t, k t]``, so with ``t = 4`` every ``l0`` in
    ``(0, 4]`` maps to 2.
    """
    if not t > 0:
        raise InvalidInputError("attractor interval t must be positive")
    return (math.ceil(l0 / t) - 0.5) * t


def target_loss(l0: float, t: float, alpha: float, kappa: float = 1e-3) -> float:
    """Reversed target margin ``l_a - alpha (l0 - l_a)``, floored at ``kappa``.

    A tie (``l0 == 0``) is treated as ``l0 = kappa`` so its attractor stays at
    ``t / 2`` rather than below the boundary.
    """
    if not kappa > 0:
        raise InvalidInputError("kappa must be positive")
    l0 = max(float(l0), kappa) if l0 <= 0 else float(l0)
    la = closest_attractor(l0, t)
    return max(la - alpha * (l0 - la), kappa)


def _target_loss_rows(l0: np.ndarray, t: float, alpha: float, kappa: float) -> np.ndarray:
    l0 = np.where(l0 <= 0, np.maximum(l0, kappa), l0)
    la = (np.ceil(l0 / t) - 0.5) * t
    return np.maximum(la - alpha * (l0 - la), kappa)


def temperature_confidence(z0, T: float) -> tuple[float, np.ndarray]:
    if not T > 0:
        raise InvalidInputError("temperature must be positive")
    probs = softmax(as_realvec(z0, "logits") / T)
    return float(probs.max()), probs


def aaa_objective(z, l_t: float, p_t: float, beta: float, orig_top1: int) -> float:
    """``|L_u(z) - l_t| + beta * |softmax(z)[orig_top1] - p_t|``."""
    z = as_realvec(z, "logits")
    c = _check_class(z, orig_top1)
    return abs(unsupervised_margin_loss(z) - l_t) + beta * abs(float(softmax(z)[c]) - p_t)


def aaa_objective_grad(z, l_t: float, p_t: float, beta: float, orig_top1: int) -> np.ndarray:
    """Subgradient of :func:`aaa_objective` with respect to the logits.

    The absolute values use ``sign(0) = 0`` (probability gaps within
    ``_kernels.PROB_TIE`` count as zero) and top-2 ties resolve to the lowest
    index, the same choices the optimizer kernels make.
    """
    z = as_realvec(z, "logits")
    c = _check_class(z, orig_top1)
    i1, v1, i2, v2 = top2(z)
    p = softmax(z)
    dc = p[c] - p_t
    sc = 0.0 if abs(dc) <= _kernels.PROB_TIE else np.sign(dc)
    g = -beta * sc * p[c] * p
    g[c] += beta * sc * p[c]
    s = np.sign(v1 - v2 - l_t)
    g[i1] += s
    g[i2] -= s
    return g


def aaa_postprocess_batch(z0: np.ndarray, cfg: AaaConfig, backend=None) -> np.ndarray:
    """Post-process a ``(n, K)`` block of logits; rows are independent."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 2 or z0.shape[1] < 2:
        raise InvalidInputError("expected logits of shape (n, K) with K >= 2")
    if not np.all(np.isfinite(z0)):
        raise InvalidInputError("logits contain non-finite values")
    rows = np.arange(len(z0))
    i1 = np.argmax(z0, axis=1)
    rest = z0.copy()
    rest[rows, i1] = -np.inf
    l0 = z0[rows, i1] - rest.max(axis=1)
    l_t = _target_loss_rows(l0, cfg.t, cfg.alpha, cfg.kappa)
    zt = z0 / cfg.temperature
    e = np.exp(zt - zt.max(axis=1, keepdims=True))
    p_t = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
    z = _kernels.optimize_logits(
        z0, l_t, p_t, i1, cfg.beta, cfg.iterations, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, backend
    )
    # decision-preservation guard
    flipped = np.argmax(z, axis=1) != i1
    if np.any(flipped):
        z[flipped] = z0[flipped]
    return z


def aaa_postprocess(z0, cfg: AaaConfig, backend=None) -> np.ndarray:
    z0 = as_realvec(z0, "logits")
    if z0.size < 2:
        raise InvalidInputError("need at least two logits")
    return aaa_postprocess_batch(z0[None, :], cfg, backend)[0]


def defended_confidences(z0: np.ndarray, cfg: AaaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 confidence and prediction of the post-processed logits."""
    z = aaa_postprocess_batch(z0, cfg)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p.max(axis=1), np.argmax(z, axis=1)


def tune_temperature(
    logits, labels, cfg: AaaConfig, grid=DEFAULT_TEMPERATURE_GRID, bins: int = 15
) -> float:
    """Grid-search the temperature minimising ECE of the defended outputs.

    Every candidate runs the full post-processor on the validation logits.
    Ties resolve to the smallest temperature.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise InvalidInputError("temperature grid is empty")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    best_t, best_e = None, math.inf
    for temp in sorted(grid):
        conf, pred = defended_confidences(logits, replace(cfg, temperature=temp))
        score = ece(conf, pred == labels, bins).ece
        if score < best_e:
            best_t, best_e = temp, score
    return best_t


def rnd_defend(x, sigma: float, rng: RngStream) -> np.ndarray:
    """Add N(0, sigma) noise (sigma is the variance) and clip to the unit box."""
    if sigma < 0:
        raise InvalidInputError("noise variance must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + math.sqrt(sigma) * rng.normal(x.shape), 0.0, 1.0)


@dataclass(frozen=True)
class DefendedModel:
    """Base MLP wrapped with an output (aaa) or input (rnd) defense."""

    weights: MlpWeights
    mode: str = "none"
    aaa: AaaConfig = field(default_factory=AaaConfig)
    sigma: float = 0.02

    def __post_init__(self):
        if self.mode not in ("none", "aaa", "rnd"):
            raise InvalidInputError(f"unknown defense mode {self.mode!r}")

    @property
    def needs_rng(self) -> bool:
        return self.mode == "rnd"

    def oracle_logits(self, x) -> np.ndarray:
        return forward(self.weights, x)

    def query(self, x, rng: RngStream | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``(defended_logits, undefended_logits)`` for one sample."""
        z0 = forward(self.weights, x)
        if self.mode == "none":
            return z0, z0
        if self.mode == "aaa":
            return aaa_postprocess_batch(z0[None, :], self.aaa)[0], z0
        return self.logits(x, rng), z0

    def logits(self, x, rng: RngStream | None = None) -> np.ndarray:
        """What a querying user sees. Batched input is supported."""
        x = np.asarray(x, dtype=np.float64)
        if self.mode == "rnd":
            if rng is None:
                raise InvalidInputError("rnd defense needs a random stream")
            return forward(self.weights, rnd_defend(x, self.sigma, rng))
        z = forward(self.weights, x)
        if self.mode == "aaa":
            return aaa_postprocess_batch(np.atleast_2d(z), self.aaa).reshape(z.shape)
        return z
