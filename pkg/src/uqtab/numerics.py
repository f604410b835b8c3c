"""Seeded random streams, stable elementwise functions and finite-difference checks."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

_U64 = (1 << 64) - 1


def derive_seed(master_seed: int, label: str, index: int = 0) -> int:
    """Mix ``(master_seed, label, index)`` into a 64-bit seed.

    Uses BLAKE2b with an 8-byte digest over a fixed little-endian packing, so
    the value is identical on every platform and Python version.
    """
    payload = struct.pack("<QQ", master_seed & _U64, index & _U64) + label.encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8, person=b"uqtab-rng").digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A named, reproducible random stream.

    The stream is fully identified by ``(master_seed, label, index)``. Child
    streams are derived with :meth:`spawn`, which is how independent work
    units (ensemble members, runs, trials) get their own randomness.
    Numpy ``Generator`` methods (``normal``, ``uniform``, ``permutation``...)
    are forwarded.
    """

    def __init__(self, master_seed: int, label: str = "root", index: int = 0):
        self.master_seed = int(master_seed) & _U64
        self.label = label
        self.index = int(index)
        self.seed = derive_seed(self.master_seed, label, self.index)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, label: str, index: int = 0) -> "RngStream":
        return RngStream(self.seed, label, index)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "label": self.label,
            "index": self.index,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        stream = cls(state["master_seed"], state["label"], state["index"])
        stream._gen.bit_generator.state = state["bit_generator"]
        return stream

    def __getattr__(self, name):
        # only reached for attributes not defined on the stream itself
        return getattr(self._gen, name)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, label={self.label!r}, index={self.index})"


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def log_sigmoid(x):
    """``log(sigmoid(x))`` without cancellation."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def bce_with_logits(logits, labels):
    """Per-sample binary cross-entropy computed from logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return np.logaddexp(0.0, logits) - labels * logits


def binary_entropy(p):
    """Shannon entropy of a Bernoulli(p) in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        nz = q > 0
        out[nz] -= q[nz] * np.log(q[nz])
    return out


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    worst_coordinate: int


class NonFiniteError(ValueError):
    pass


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step.flat[i] = h
        f_plus = float(f(theta + step))
        f_minus = float(f(theta - step))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def check_gradient(f, grad, theta, h: float = 1e-5) -> GradCheckResult:
    """Compare an analytic gradient against central differences."""
    numeric = finite_diff_grad(f, theta, h)
    err = relative_error(np.asarray(grad).ravel(), numeric.ravel())
    worst = int(np.argmax(err)) if err.size else 0
    return GradCheckResult(float(err.max()) if err.size else 0.0, worst)
