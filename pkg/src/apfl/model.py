"""Parameter vectors, a small softmax MLP, local SGD and label distributions.

Parameters are flattened layer-major and row-major within a layer:
``W1 (d x h), b1 (h), W2 (h x J), b2 (J)``. A model with ``hidden == 0`` is a
plain linear softmax classifier ``W (d x J), b (J)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergedTraining, RejectedInput

FULL = "full"
LAST_LAYER = "last-layer-only"
TRAINING_MODES = (FULL, LAST_LAYER)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, immutable model weights plus the layer boundaries.

    ``layout`` holds increasing boundaries ``(0, b1, ..., n)``; consecutive
    pairs are layer spans and the last span is the output layer.
    """

    values: np.ndarray
    layout: tuple[int, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise RejectedInput("parameter vector is empty")
        if not np.all(np.isfinite(values)):
            raise RejectedInput("parameter vector contains non-finite values")
        layout = tuple(int(b) for b in self.layout)
        if len(layout) < 2 or layout[0] != 0 or layout[-1] != values.size:
            raise RejectedInput(f"layout {layout} does not cover [0, {values.size})")
        if any(b1 >= b2 for b1, b2 in zip(layout, layout[1:])):
            raise RejectedInput(f"layout {layout} is not strictly increasing")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    @property
    def final_span(self) -> tuple[int, int]:
        return self.layout[-2], self.layout[-1]

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def equals(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and np.array_equal(self.values, other.values)


@dataclass(eq=False)
class LocalDataset:
    """Features ``X`` (n x d) and integer labels ``y`` in ``[0, n_classes)``."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2:
            raise RejectedInput("features must be a 2-D array")
        if self.X.shape[0] != self.y.shape[0]:
            raise RejectedInput("feature and label counts differ")
        if self.n_classes < 1:
            raise RejectedInput("n_classes must be positive")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise RejectedInput("label outside [0, n_classes)")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes).astype(np.int64)

    def concat(self, other: "LocalDataset") -> "LocalDataset":
        return LocalDataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), self.n_classes)


@dataclass(frozen=True)
class LabelDistributions:
    hard: np.ndarray  # argmax counts per class
    soft: np.ndarray  # mean softmax probability per class


@dataclass(frozen=True)
class MLP:
    n_features: int
    n_classes: int
    hidden: int = 16

    @property
    def shapes(self) -> list[tuple[int, int]]:
        if self.hidden == 0:
            return [(self.n_features, self.n_classes)]
        return [(self.n_features, self.hidden), (self.hidden, self.n_classes)]

    @property
    def layout(self) -> tuple[int, ...]:
        bounds = [0]
        for fan_in, fan_out in self.shapes:
            bounds.append(bounds[-1] + fan_in * fan_out + fan_out)
        return tuple(bounds)

    @property
    def n_params(self) -> int:
        return self.layout[-1]

    @property
    def payload_bytes(self) -> int:
        return 4 * self.n_params

    @classmethod
    def infer(cls, params: ParamVector, n_features: int, n_classes: int) -> "MLP":
        """Recover the architecture bound to ``params`` for data of the given shape."""
        n = len(params)
        if len(params.layout) == 2:
            arch = cls(n_features, n_classes, 0)
        elif len(params.layout) == 3:
            first = params.layout[1]
            if first % (n_features + 1):
                raise RejectedInput("parameter layout does not match the feature dimension")
            arch = cls(n_features, n_classes, first // (n_features + 1))
        else:
            raise RejectedInput(f"unsupported layout with {len(params.layout) - 1} layers")
        if arch.n_params != n or arch.layout != params.layout:
            raise RejectedInput("parameter vector does not match the model architecture")
        return arch

    def init(self, rng: np.random.Generator) -> ParamVector:
        parts = []
        for fan_in, fan_out in self.shapes:
            parts.append(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        return ParamVector(np.concatenate(parts), self.layout)

    def zeros(self) -> ParamVector:
        return ParamVector(np.zeros(self.n_params), self.layout)

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            W = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = values[offset : offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def logits(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        layers = self.unpack(values)
        a = X
        for W, b in layers[:-1]:
            a = np.maximum(a @ W + b, 0.0)
        W, b = layers[-1]
        return a @ W + b

    def probabilities(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(values, X))

    def loss_and_grad(self, values: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over the batch and its gradient w.r.t. ``values``."""
        layers = self.unpack(values)
        acts = [X]
        pre = []
        a = X
        for W, b in layers[:-1]:
            z = a @ W + b
            pre.append(z)
            a = np.maximum(z, 0.0)
            acts.append(a)
        W_out, b_out = layers[-1]
        logits = a @ W_out + b_out
        n = X.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

        delta = np.exp(shifted - log_norm[:, None])
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W.T) * (pre[i - 1] > 0)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.reshape(-1))
            flat.append(gb)
        return loss, np.concatenate(flat)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def l1_distance(a: ParamVector, b: ParamVector) -> float:
    if len(a) != len(b) or a.layout != b.layout:
        raise RejectedInput(f"dimension mismatch: {len(a)} vs {len(b)}")
    return float(np.abs(a.values - b.values).sum())


def sgd_train(
    params: ParamVector,
    data: LocalDataset,
    epochs: int,
    lr: float,
    mode: str = FULL,
    *,
    batch_size: int = 10,
    seed: int | np.random.Generator = 0,
) -> ParamVector:
    """Plain mini-batch SGD on cross-entropy.

    In ``last-layer-only`` mode every entry outside the output-layer span is
    returned bit-identical to the input.
    """
    if mode not in TRAINING_MODES:
        raise RejectedInput(f"unknown training mode {mode!r}")
    if lr < 0:
        raise RejectedInput("learning rate must be non-negative")
    arch = MLP.infer(params, data.n_features, data.n_classes)
    values = params.values.copy()
    if lr == 0 or epochs <= 0 or len(data) == 0:
        return params
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = params.final_span
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = arch.loss_and_grad(values, data.X[idx], data.y[idx])
            if not np.isfinite(loss):
                raise DivergedTraining(epoch)
            if mode == LAST_LAYER:
                values[lo:hi] -= lr * grad[lo:hi]
            else:
                values -= lr * grad
        if not np.all(np.isfinite(values)):
            raise DivergedTraining(epoch)
    return params.replace(values)


def infer_distributions(params: ParamVector, data: LocalDataset) -> LabelDistributions:
    if len(data) == 0:
        raise RejectedInput("cannot infer distributions on an empty dataset")
    arch = MLP.infer(params, data.n_features, data.n_classes)
    probs = arch.probabilities(params.values, data.X)
    hard = np.bincount(probs.argmax(axis=1), minlength=data.n_classes).astype(np.int64)
    return LabelDistributions(hard=hard, soft=probs.mean(axis=0))


def accuracy(params: ParamVector, data: LocalDataset) -> float:
    if len(data) == 0:
        return 0.0
    arch = MLP.infer(params, data.n_features, data.n_classes)
    pred = arch.logits(params.values, data.X).argmax(axis=1)
    return float(np.mean(pred == data.y))


def gradient_check(params: ParamVector, data: LocalDataset, step: float = 1e-4) -> float:
    """Worst relative error of the analytic gradient vs central differences.

    The relative error uses ``max(1, |g|)`` as denominator.
    """
    if len(data) == 0:
        raise RejectedInput("gradient check needs a non-empty dataset")
    arch = MLP.infer(params, data.n_features, data.n_classes)
    values = params.values.copy()
    _, analytic = arch.loss_and_grad(values, data.X, data.y)
    worst = 0.0
    for k in range(values.size):
        orig = values[k]
        values[k] = orig + step
        plus, _ = arch.loss_and_grad(values, data.X, data.y)
        values[k] = orig - step
        minus, _ = arch.loss_and_grad(values, data.X, data.y)
        values[k] = orig
        numeric = (plus - minus) / (2 * step)
        err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
        worst = max(worst, err)
    return float(worst)
