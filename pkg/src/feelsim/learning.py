"""Desk-scale supervised learning used by every device.

A one-hidden-layer ReLU perceptron with a softmax cross-entropy head, trained
by mini-batch SGD on flat ``float64`` parameter vectors. Synthetic Gaussian
cluster data stands in for an image dataset; a CSV loader lets a small real
dataset replace it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream

__all__ = [
    "Dataset",
    "DeviceState",
    "ModelSpec",
    "evaluate",
    "init_params",
    "load_csv_dataset",
    "local_sgd",
    "loss_and_grad",
    "partition",
    "synthesize_dataset",
]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("features must be (n, k) and labels (n,)")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return int(self.labels.size)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths from input to output; hidden layers use ReLU."""

    layer_sizes: tuple[int, ...] = (20, 32, 10)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output layer of positive width")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def d(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def unpack(self, w: np.ndarray):
        """Views ``[(W1, b1), (W2, b2), ...]`` into ``w``; ``W`` is (fan_in, fan_out)."""
        if w.shape != (self.d,):
            raise ValueError(f"expected {self.d} parameters, got {w.shape}")
        layers, o = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = w[o:o + a * b].reshape(a, b)
            o += a * b
            layers.append((W, w[o:o + b]))
            o += b
        return layers


@dataclass
class DeviceState:
    shard: Dataset
    error: np.ndarray
    power_spent: float = 0.0

    @classmethod
    def fresh(cls, shard: Dataset, d: int) -> "DeviceState":
        return cls(shard=shard, error=np.zeros(d))


def init_params(spec: ModelSpec, rng: RngStream | np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    w = np.zeros(spec.d)
    for W, _ in spec.unpack(w):
        a, b = W.shape
        lim = np.sqrt(6.0 / (a + b))
        W[...] = gen.uniform(-lim, lim, size=(a, b))
    return w


def _forward(spec: ModelSpec, w: np.ndarray, X: np.ndarray):
    acts = [X]
    layers = spec.unpack(w)
    for i, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else z)
    return layers, acts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, w, data: Dataset, idx=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``data`` (or rows ``idx``) and its gradient."""
    w = np.asarray(w, dtype=np.float64)
    X, y = data.features, data.labels
    if idx is not None:
        X, y = X[idx], y[idx]
    n = y.size
    layers, acts = _forward(spec, w, X)
    logp = _log_softmax(acts[-1])
    loss = -logp[np.arange(n), y].mean()

    grad = np.zeros_like(w)
    glayers = spec.unpack(grad)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0)
    return float(loss), grad


def evaluate(spec: ModelSpec, w, data: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy; ties in the logits go to the lowest class."""
    _, acts = _forward(spec, np.asarray(w, dtype=np.float64), data.features)
    logits = acts[-1]
    logp = _log_softmax(logits)
    n = len(data)
    loss = float(-logp[np.arange(n), data.labels].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return loss, acc


def local_sgd(
    spec: ModelSpec,
    w_start,
    shard: Dataset,
    H: int,
    B: int,
    eta: float,
    rng: RngStream | np.random.Generator,
) -> np.ndarray:
    """Run ``H`` mini-batch SGD steps from ``w_start`` and return ``w_H - w_start``.

    Each step draws a fresh batch of ``B`` distinct samples. Batch indices are
    sorted so a full-shard batch reproduces the full-batch gradient bit for bit.
    """
    n = len(shard)
    if n == 0:
        raise ValueError("empty shard")
    if H < 1 or not 1 <= B <= n:
        raise ValueError(f"need H >= 1 and 1 <= B <= {n}")
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    w0 = np.asarray(w_start, dtype=np.float64)
    w = w0.copy()
    for _ in range(H):
        idx = np.sort(gen.choice(n, size=B, replace=False))
        _, g = loss_and_grad(spec, w, shard, idx)
        w -= eta * g
    return w - w0


def synthesize_dataset(
    num_classes: int,
    samples: int,
    dim: int,
    rng: RngStream | np.random.Generator,
    separation: float = 3.0,
) -> Dataset:
    """Balanced Gaussian clusters with unit variance around scaled random unit means."""
    if samples < num_classes:
        raise ValueError("need at least one sample per class")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    means = gen.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation
    labels = gen.permutation(np.arange(samples) % num_classes)
    X = means[labels] + gen.standard_normal((samples, dim))
    return Dataset(X, labels, num_classes)


def load_csv_dataset(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read header-free ``label,f1,...,fk`` rows."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if rows and len(row) - 1 != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: ragged row ({len(row) - 1} features)")
            labels.append(int(row[0]))
            rows.append([float(c) for c in row[1:]])
    if not rows or not rows[0]:
        raise ValueError(f"{path}: no feature rows")
    y = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    return Dataset(np.array(rows), y, num_classes)


def partition(
    data: Dataset,
    n_devices: int,
    mode: str,
    rng: RngStream | np.random.Generator,
    classes_per_device: int = 2,
) -> list[Dataset]:
    """Split ``data`` into disjoint device shards.

    ``mode="iid"`` deals a random permutation into near-equal shards.
    ``mode="label_skew"`` deals ``classes_per_device`` class slots per
    device round-robin over a random class permutation, then splits each
    class evenly among the devices holding it.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    n = len(data)
    if mode == "iid":
        if n < n_devices:
            raise ValueError("fewer samples than devices")
        chunks = np.array_split(gen.permutation(n), n_devices)
        return [data.subset(np.sort(c)) for c in chunks]
    if mode != "label_skew":
        raise ValueError(f"unknown partition mode {mode!r}")

    C = data.num_classes
    c = classes_per_device
    if not 1 <= c <= C:
        raise ValueError("classes_per_device must be in [1, num_classes]")
    if c * n_devices < C:
        raise ValueError("classes_per_device * n_devices must cover every class")
    order = gen.permutation(C)
    holders: dict[int, list[int]] = {k: [] for k in range(C)}
    for slot in range(n_devices * c):
        holders[int(order[slot % C])].append(slot // c)

    owned: list[list[np.ndarray]] = [[] for _ in range(n_devices)]
    for k, devs in holders.items():
        idx = gen.permutation(np.flatnonzero(data.labels == k))
        if devs and idx.size < len(devs):
            raise ValueError(f"class {k} has {idx.size} samples for {len(devs)} shards")
        for dev, part in zip(devs, np.array_split(idx, len(devs)) if devs else []):
            owned[dev].append(part)
    return [data.subset(np.sort(np.concatenate(parts))) for parts in owned]
