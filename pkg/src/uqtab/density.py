"""Density baselines: probabilistic PCA and a reconstruction-error autoencoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import Network, TrainConfig, TrainingTrace, run_training
from .numerics import RngStream

SIGMA2_FLOOR = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PpcaModel:
    mean: np.ndarray
    loadings: np.ndarray  # D x q
    sigma2: float
    eigenvalues: np.ndarray  # the q retained eigenvalues of the sample covariance
    clamped: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.loadings = np.asarray(self.loadings, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self._cache()

    def _cache(self):
        w = self.loadings
        d, q = w.shape
        m = w.T @ w + self.sigma2 * np.eye(q)
        chol = np.linalg.cholesky(m)
        self._m_chol = chol
        self._logdet = (d - q) * math.log(self.sigma2) + 2.0 * float(np.log(np.diag(chol)).sum())

    @property
    def n_inputs(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]

    def covariance(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + self.sigma2 * np.eye(self.n_inputs)

    def log_likelihood(self, x) -> np.ndarray:
        """Row-wise Gaussian log density under C = W W^T + sigma2 I.

        Uses the Woodbury identity so only the q x q matrix
        M = W^T W + sigma2 I is ever factorised.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {x.shape[1]}")
        r = x - self.mean
        proj = r @ self.loadings
        sol = np.linalg.solve(self._m_chol, proj.T)  # L^{-1} W^T r
        quad = (np.einsum("ij,ij->i", r, r) - np.einsum("ij,ij->j", sol, sol)) / self.sigma2
        out = -0.5 * (self.n_inputs * LOG_2PI + self._logdet + quad)
        return out[0] if single else out

    def novelty(self, x) -> np.ndarray:
        return -self.log_likelihood(x)


def fit_ppca(features, q: int) -> PpcaModel:
    """Closed-form maximum-likelihood PPCA from the eigendecomposition of the sample covariance."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    n, d = x.shape
    if not 0 < q < d:
        raise ValueError(f"need 0 < q < D, got q={q}, D={d}")
    if n <= q:
        raise ValueError(f"need more rows than components, got N={n}, q={q}")
    mean = x.mean(axis=0)
    r = x - mean
    cov = r.T @ r / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # deterministic sign: largest-magnitude entry of each retained vector is positive
    u = evecs[:, :q].copy()
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(q)])
    u *= np.where(flip == 0, 1.0, flip)
    sigma2 = float(np.mean(evals[q:]))
    clamped = sigma2 < SIGMA2_FLOOR
    if clamped:
        sigma2 = SIGMA2_FLOOR
    lam = evals[:q]
    w = u * np.sqrt(np.maximum(lam - sigma2, 0.0))
    return PpcaModel(mean, w, sigma2, lam, clamped)


def ppca_log_likelihood(model: PpcaModel, x):
    return model.log_likelihood(x)


# --------------------------------------------------------------------------
# Autoencoder
# --------------------------------------------------------------------------

@dataclass
class AutoencoderModel:
    net: Network
    latent_dim: int
    learning_rate: float = 1e-3

    @property
    def n_inputs(self) -> int:
        return self.net.weights[0].shape[0]

    @property
    def dropout_rate(self) -> float:
        return self.net.dropout_rate

    def reconstruct(self, x) -> np.ndarray:
        return self.net.predict(np.asarray(x, dtype=np.float64))

    def novelty(self, x) -> np.ndarray:
        return reconstruction_error(self, x)


def autoencoder_network(n_inputs: int, hidden_sizes, latent_dim: int, rng: RngStream,
                        dropout_rate: float = 0.0) -> Network:
    """Mirror-symmetric encoder/decoder; ReLU hidden layers, linear code and output."""
    hidden = list(hidden_sizes)
    sizes = [n_inputs, *hidden, latent_dim, *hidden[::-1], n_inputs]
    acts = ["relu"] * len(hidden) + ["linear"] + ["relu"] * len(hidden) + ["linear"]
    return Network.create(sizes, acts, rng, dropout_rate)


def reconstruction_error(model, x) -> np.ndarray:
    """Mean over features of the squared reconstruction residual, per row."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    rec = model.reconstruct(x)
    err = np.mean((x - rec) ** 2, axis=1)
    return err[0] if single else err


def mse_loss_and_grad(net: Network, x, masks=None):
    out, cache = net.forward(x, masks)
    n, d = x.shape
    resid = out - x
    loss = float(np.sum(resid * resid) / (n * d))
    gw, gb = net.backward(cache, 2.0 * resid / (n * d), masks)
    return loss, [*gw, *gb]


def train_autoencoder(
    config: TrainConfig,
    hidden_sizes,
    latent_dim: int,
    x_train,
    x_val,
    rng: RngStream,
    dropout_rate: float = 0.0,
    init: Network | None = None,
) -> tuple[AutoencoderModel, TrainingTrace]:
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    net = init.copy() if init is not None else autoencoder_network(
        x_train.shape[1], hidden_sizes, latent_dim, rng.spawn("init"), dropout_rate)
    model = AutoencoderModel(net, int(latent_dim), config.learning_rate)

    def batch_step(rows, brng):
        xb = x_train[rows]
        return mse_loss_and_grad(net, xb, net.draw_masks(len(rows), brng))

    def mean_err(x):
        return float(np.mean(reconstruction_error(model, x)))

    trace = run_training(net.params(), batch_step, lambda: mean_err(x_train), lambda: mean_err(x_val),
                         len(x_train), config, rng.spawn("batches"))
    return model, trace
