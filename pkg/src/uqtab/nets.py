"""Dense feed-forward networks with hand-written backprop, Adam and an early-stopping loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import RngStream


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


def init_layers(sizes, rng: RngStream):
    """Zero-mean uniform weights with half-width sqrt(2 / fan_in), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(2.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


@dataclass
class Network:
    """Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.

    ``activations[i]`` is ``"relu"`` or ``"linear"`` for layer ``i``; dropout
    is applied to the output of every layer except the last.
    """

    weights: list
    biases: list
    activations: list
    dropout_rate: float = 0.0

    @classmethod
    def create(cls, sizes, activations, rng: RngStream, dropout_rate: float = 0.0) -> "Network":
        w, b = init_layers(sizes, rng)
        return cls(w, b, list(activations), float(dropout_rate))

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       list(self.activations), self.dropout_rate)

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def draw_masks(self, n_rows: int, rng: RngStream, rate: float | None = None):
        """Inverted-dropout masks for each hidden layer output, or None when rate is 0."""
        rate = self.dropout_rate if rate is None else rate
        if rate <= 0.0:
            return None
        keep = 1.0 - rate
        return [(rng.uniform(size=(n_rows, w.shape[1])) < keep) / keep for w in self.weights[:-1]]

    def forward(self, x, masks=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"expected input with {self.weights[0].shape[0]} columns, got shape {x.shape}")
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            z = h @ w + b
            h = np.maximum(z, 0.0) if act == "relu" else z
            if i < last and masks is not None:
                h = h * masks[i]
            cache.append((z, h))
        return h, cache

    def backward(self, cache, dout, masks=None):
        """Gradients of a loss w.r.t. weights and biases given dL/d(output)."""
        n_layers = len(self.weights)
        gw = [None] * n_layers
        gb = [None] * n_layers
        delta = dout
        for i in range(n_layers - 1, -1, -1):
            z, _ = cache[i + 1]
            if i < n_layers - 1 and masks is not None:
                delta = delta * masks[i]
            if self.activations[i] == "relu":
                delta = delta * (z > 0.0)
            h_prev = cache[i] if i == 0 else cache[i][1]
            gw[i] = h_prev.T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i].T
        return gw, gb

    def predict(self, x, masks=None) -> np.ndarray:
        return self.forward(x, masks)[0]


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 10
    patience: int = 3
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class TrainingTrace:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


def run_training(
    params: list,
    batch_step: Callable,
    train_loss: Callable[[], float],
    val_loss: Callable[[], float],
    n_rows: int,
    config: TrainConfig,
    rng: RngStream,
) -> TrainingTrace:
    """Minibatch Adam with early stopping on validation loss.

    ``batch_step(rows, rng)`` returns ``(loss, grads)`` aligned with ``params``.
    Entry 0 of the trace is the untrained state. On return ``params`` hold the
    values from the epoch with the lowest recorded validation loss.
    """
    opt = Adam(params, config.learning_rate)
    trace = TrainingTrace()
    trace.train_loss.append(train_loss())
    trace.val_loss.append(val_loss())
    if not math.isfinite(trace.val_loss[0]):
        raise TrainingDiverged(0)
    best = [p.copy() for p in params]
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, config.batch_size):
            rows = order[start:start + config.batch_size]
            loss, grads = batch_step(rows, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(params, grads)
        tr, va = train_loss(), val_loss()
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(epoch)
        trace.train_loss.append(tr)
        trace.val_loss.append(va)
        trace.stopped_epoch = epoch
        if va < trace.val_loss[trace.best_epoch]:
            trace.best_epoch = epoch
            best = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for p, b in zip(params, best):
        p[...] = b
    return trace


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.empty(0)


def unflatten(vector, like) -> list:
    out, pos = [], 0
    for a in like:
        out.append(np.asarray(vector[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
        pos += a.size
    return out
