"""Dense model layer: parameter vectors, forward passes, loss/grad, SGD.

Two model families are supported: a linear (single-layer softmax)
classifier and a one-hidden-layer ReLU network. Parameters live in a
single flat float64 vector, laid out as row-major weight blocks with the
bias appended per layer:

    linear:  W(d_in x d_out), b(d_out)
    mlp:     W1(d_in x d_hidden), b1(d_hidden), W2(d_hidden x d_out), b2(d_out)

All functions are pure; ModelParams is immutable once constructed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .rng import stream

__all__ = [
    "Arch",
    "Batch",
    "ModelParams",
    "forward",
    "init_model",
    "loss_and_grad",
    "model_from_bytes",
    "model_to_bytes",
    "sgd_epochs",
]

_ARCH_TAGS = {"linear": 0, "mlp": 1}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor. d_hidden is 0 for the linear family."""

    kind: str
    d_in: int
    d_out: int
    d_hidden: int = 0

    def __post_init__(self):
        if self.kind not in _ARCH_TAGS:
            raise ValueError(f"unknown arch kind {self.kind!r}")
        if self.d_in < 1 or self.d_out < 2:
            raise ValueError("need d_in >= 1 and d_out >= 2")
        if self.kind == "linear" and self.d_hidden != 0:
            raise ValueError("linear arch takes no hidden layer")
        if self.kind == "mlp" and self.d_hidden < 1:
            raise ValueError("mlp arch needs d_hidden >= 1")

    @staticmethod
    def linear(d_in: int, d_out: int) -> "Arch":
        return Arch("linear", d_in, d_out)

    @staticmethod
    def mlp(d_in: int, d_hidden: int, d_out: int) -> "Arch":
        return Arch("mlp", d_in, d_out, d_hidden)

    @property
    def param_count(self) -> int:
        if self.kind == "linear":
            return self.d_in * self.d_out + self.d_out
        h = self.d_hidden
        return self.d_in * h + h + h * self.d_out + self.d_out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus its architecture."""

    arch: Arch
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size != self.arch.param_count:
            raise DimensionError(
                f"weight vector of length {w.size}, arch needs {self.arch.param_count}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight entries")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Unflatten into [(W, b), ...] views."""
        a, w = self.arch, self.weights
        if a.kind == "linear":
            split = a.d_in * a.d_out
            return [(w[:split].reshape(a.d_in, a.d_out), w[split:])]
        h = a.d_hidden
        i = 0
        w1 = w[i : i + a.d_in * h].reshape(a.d_in, h)
        i += a.d_in * h
        b1 = w[i : i + h]
        i += h
        w2 = w[i : i + h * a.d_out].reshape(h, a.d_out)
        i += h * a.d_out
        b2 = w[i:]
        return [(w1, b1), (w2, b2)]


@dataclass(frozen=True, eq=False)
class Batch:
    """Feature matrix (n x d_in) with integer class labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DimensionError("features must be (n, d_in) with labels (n,)")
        if x.shape[0] < 1:
            raise DimensionError("batch must contain at least one row")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite feature entries")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]


def init_model(arch: Arch, seed: int) -> ModelParams:
    """Seeded init: per layer uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Draws come from the dedicated "model-init" stream of the seed.
    """
    rng = stream(seed, "model-init")
    parts = []
    if arch.kind == "linear":
        shapes = [(arch.d_in, arch.d_out)]
    else:
        shapes = [(arch.d_in, arch.d_hidden), (arch.d_hidden, arch.d_out)]
    for fan_in, fan_out in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(arch, np.concatenate(parts))


def _logits(model: ModelParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != model.arch.d_in:
        raise DimensionError(
            f"features of width {x.shape[1] if x.ndim == 2 else '?'}, "
            f"arch expects {model.arch.d_in}"
        )
    layers = model.layers()
    if model.arch.kind == "linear":
        (w, b), = layers
        return x @ w + b
    (w1, b1), (w2, b2) = layers
    hidden = np.maximum(x @ w1 + b1, 0.0)
    return hidden @ w2 + b2


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class-probability rows (softmax of the logits), shape (n, d_out)."""
    x = np.asarray(features, dtype=np.float64)
    return _softmax(_logits(model, x))


def loss_and_grad(model: ModelParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat weights."""
    x, y = batch.features, batch.labels
    arch = model.arch
    if y.min() < 0 or y.max() >= arch.d_out:
        raise DimensionError("labels outside [0, d_out)")
    n = batch.n

    if arch.kind == "linear":
        (w, b), = model.layers()
        logits = x @ w + b
        lse = _log_sum_exp(logits)
        loss = float(np.mean(lse - logits[np.arange(n), y]))
        dlogits = _softmax(logits)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        grad = np.concatenate([(x.T @ dlogits).ravel(), dlogits.sum(axis=0)])
        return loss, grad

    (w1, b1), (w2, b2) = model.layers()
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ w2 + b2
    lse = _log_sum_exp(logits)
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    dlogits = _softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dw2 = a1.T @ dlogits
    db2 = dlogits.sum(axis=0)
    da1 = dlogits @ w2.T
    dz1 = da1 * (z1 > 0.0)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    grad = np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])
    return loss, grad


def _log_sum_exp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def sgd_epochs(
    model: ModelParams,
    shard_train: Batch,
    lr: float,
    epochs: int,
    batch_size: int,
    rng_seed: int,
    momentum: float = 0.0,
) -> ModelParams:
    """Mini-batch SGD for a fixed number of epochs.

    Deterministic: the per-epoch batch order comes from the
    "batch-shuffle" stream of rng_seed. epochs=0 returns the input
    unchanged; batch_size >= n makes each epoch one full-batch step.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if epochs < 0 or batch_size < 1:
        raise ValueError("need epochs >= 0 and batch_size >= 1")
    if epochs == 0:
        return model

    rng = stream(rng_seed, "batch-shuffle")
    w = model.weights.copy()
    velocity = np.zeros_like(w)
    n = shard_train.n
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            current = ModelParams(model.arch, w)
            _, grad = loss_and_grad(
                current, Batch(shard_train.features[idx], shard_train.labels[idx])
            )
            velocity = momentum * velocity + grad
            w -= lr * velocity
    return ModelParams(model.arch, w)


def model_to_bytes(model: ModelParams) -> bytes:
    """Flat binary record: arch tag (1 byte), dims (u32 LE each), weights (f64 LE)."""
    a = model.arch
    dims = (a.d_in, a.d_out) if a.kind == "linear" else (a.d_in, a.d_hidden, a.d_out)
    head = struct.pack("<B", _ARCH_TAGS[a.kind]) + struct.pack(f"<{len(dims)}I", *dims)
    return head + model.weights.astype("<f8").tobytes()


def model_from_bytes(blob: bytes) -> ModelParams:
    """Inverse of model_to_bytes."""
    (tag,) = struct.unpack_from("<B", blob, 0)
    kind = _TAG_ARCHS.get(tag)
    if kind is None:
        raise ValueError(f"unknown arch tag {tag}")
    if kind == "linear":
        d_in, d_out = struct.unpack_from("<2I", blob, 1)
        arch, offset = Arch.linear(d_in, d_out), 1 + 8
    else:
        d_in, d_hidden, d_out = struct.unpack_from("<3I", blob, 1)
        arch, offset = Arch.mlp(d_in, d_hidden, d_out), 1 + 12
    weights = np.frombuffer(blob, dtype="<f8", offset=offset)
    if weights.size != arch.param_count:
        raise DimensionError("weight payload does not match declared dims")
    return ModelParams(arch, weights.astype(np.float64))
