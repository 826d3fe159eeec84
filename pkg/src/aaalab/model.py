"""Toy classifier: Gaussian-blob data, a tanh MLP, training and text persistence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aaalab.numkit import AdamState, InvalidInputError, RngStream, adam_step, softmax_rows

WEIGHTS_MAGIC = "mlpweights"
WEIGHTS_VERSION = "v1"


class WeightsFormatError(ValueError):
    """Malformed weights file; ``lineno`` is 1-based (0 when not line-specific)."""

    def __init__(self, msg: str, lineno: int = 0):
        super().__init__(f"line {lineno}: {msg}" if lineno else msg)
        self.lineno = lineno


class WeightsVersionError(WeightsFormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray  # (n, dim) in [0, 1]
    y: np.ndarray  # (n,) int labels
    classes: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or len(self.x) != len(self.y):
            raise InvalidInputError("dataset needs x of shape (n, d) and y of shape (n,)")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise InvalidInputError("labels must lie in [0, classes)")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.classes)


@dataclass(frozen=True)
class MlpWeights:
    """Layer list of ``(W, b)`` with ``W`` shaped ``(fan_in, fan_out)``.

    Hidden layers use tanh; the output layer is linear.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise InvalidInputError("an MLP needs at least one layer")
        if self.activation != "tanh":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {k}: bias does not match weight columns")
            if k and w.shape[0] != self.layers[k - 1][0].shape[1]:
                raise InvalidInputError(f"layer {k}: input width does not match previous layer")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def scaled_output(self, factor: float) -> "MlpWeights":
        """Copy with the output layer multiplied by ``factor`` (logit scaling)."""
        w, b = self.layers[-1]
        return MlpWeights(self.layers[:-1] + ((w * factor, b * factor),), self.activation)


def make_blobs(n_per_class: int, classes: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters inside the unit box.

    Class centers are drawn uniformly from ``[0.15, 0.85]^dim`` and samples are
    ``center + spread * N(0, I)`` clipped to ``[0, 1]``. Samples come out
    grouped by class; shuffle downstream.
    """
    if n_per_class <= 0 or classes < 2 or dim < 2:
        raise InvalidInputError("need n_per_class > 0, classes >= 2, dim >= 2")
    if not spread > 0:
        raise InvalidInputError("spread must be positive")
    rng = RngStream(seed, key=(0xB10B,))
    centers = 0.15 + 0.7 * rng.uniform((classes, dim))
    noise = rng.normal((classes, n_per_class, dim))
    x = np.clip(centers[:, None, :] + spread * noise, 0.0, 1.0).reshape(-1, dim)
    y = np.repeat(np.arange(classes), n_per_class)
    return LabeledDataset(x, y, classes)


def quantize8(x) -> np.ndarray:
    """Round features to the nearest multiple of 1/255, halves going up."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InvalidInputError("quantize8 expects features in [0, 1]")
    # tiny slack so values that are a half-step up to rounding noise still go up
    return np.floor(arr * 255.0 + 0.5 + 1e-9) / 255.0


def forward(w: MlpWeights, x) -> np.ndarray:
    """Logits for one sample ``(dim,)`` or a batch ``(n, dim)``."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != w.layers[0][0].shape[0]:
        raise InvalidInputError(
            f"feature dim {h.shape[-1]} does not match input layer {w.layers[0][0].shape[0]}"
        )
    last = len(w.layers) - 1
    for k, (wk, bk) in enumerate(w.layers):
        h = h @ wk + bk
        if k < last:
            h = np.tanh(h)
    return h


def predict(w: MlpWeights, x) -> np.ndarray:
    return np.argmax(forward(w, x), axis=-1)


def accuracy(w: MlpWeights, data: LabeledDataset) -> float:
    return float(np.mean(predict(w, data.x) == data.y))


def init_mlp(dims: list[int], seed: int) -> MlpWeights:
    rng = RngStream(seed, key=(0x1417,))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit
        layers.append((w, np.zeros(fan_out)))
    return MlpWeights(tuple(layers))


def _backprop(w: MlpWeights, x: np.ndarray, y: np.ndarray):
    acts = [x]
    h = x
    last = len(w.layers) - 1
    for k, (wk, bk) in enumerate(w.layers):
        h = h @ wk + bk
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    p = softmax_rows(acts[-1])
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(w.layers)
    for k in range(last, -1, -1):
        wk, _ = w.layers[k]
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        if k:
            delta = (delta @ wk.T) * (1.0 - acts[k] ** 2)
    return loss, grads


def train_mlp(
    data: LabeledDataset,
    hidden_dims=(32, 32),
    epochs: int = 60,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-2,
) -> tuple[MlpWeights, float]:
    """Mini-batch Adam on softmax cross-entropy.

    Returns ``(weights, final_training_accuracy)``; ``epochs=0`` returns the
    initialization untouched.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    dims = [data.x.shape[1], *[int(h) for h in hidden_dims], data.classes]
    weights = init_mlp(dims, seed)
    params = [arr for layer in weights.layers for arr in layer]
    states = [AdamState.fresh(p.shape, lr=lr) for p in params]
    order_rng = RngStream(seed, key=(0x0BDE,))
    n = len(data)
    for _ in range(int(epochs)):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            _, grads = _backprop(weights, data.x[idx], data.y[idx])
            flat = [g for pair in grads for g in pair]
            for i, (p, g) in enumerate(zip(params, flat)):
                params[i], states[i] = adam_step(states[i], p, g)
            weights = MlpWeights(tuple(zip(params[0::2], params[1::2])))
    return weights, accuracy(weights, data)


def save_weights(w: MlpWeights, path) -> None:
    lines = [" ".join([WEIGHTS_MAGIC, WEIGHTS_VERSION, *map(str, w.dims)])]
    for wk, bk in w.layers:
        lines.extend(" ".join(repr(float(v)) for v in row) for row in wk)
        lines.append(" ".join(repr(float(v)) for v in bk))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_row(line: str, width: int, lineno: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != width:
        raise WeightsFormatError(f"expected {width} values, found {len(parts)}", lineno)
    try:
        row = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise WeightsFormatError(f"bad number ({exc})", lineno) from None
    if not np.all(np.isfinite(row)):
        raise WeightsFormatError("non-finite value", lineno)
    return row


def load_weights(path) -> MlpWeights:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise WeightsFormatError("empty weights file", 1)
    head = lines[0].split()
    if len(head) < 2 or head[0] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"missing '{WEIGHTS_MAGIC}' header", 1)
    if head[1] != WEIGHTS_VERSION:
        raise WeightsVersionError(f"unsupported version {head[1]!r}", 1)
    try:
        dims = [int(d) for d in head[2:]]
    except ValueError:
        raise WeightsFormatError("layer dims must be integers", 1) from None
    if len(dims) < 2 or min(dims) < 1:
        raise WeightsFormatError("need at least two positive layer dims", 1)
    expected = sum(fi + 1 for fi in dims[:-1]) + 1
    if len(lines) < expected:
        raise WeightsFormatError(f"truncated file: expected {expected} lines", len(lines) + 1)
    if any(ln.strip() for ln in lines[expected:]):
        raise WeightsFormatError("trailing content after last layer", expected + 1)
    layers = []
    cursor = 1
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        rows = [_parse_row(lines[cursor + r], fan_out, cursor + r + 1) for r in range(fan_in)]
        cursor += fan_in
        bias = _parse_row(lines[cursor], fan_out, cursor + 1)
        cursor += 1
        layers.append((np.vstack(rows), bias))
    return MlpWeights(tuple(layers))
