"""Probabilistic binary classifiers: MLP, MC dropout, temperature scaling,
logistic regression, Bayes-by-Backprop and three ensemble flavours."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .nets import Network, TrainConfig, TrainingDiverged, TrainingTrace, run_training
from .numerics import RngStream, bce_with_logits, sigmoid, softplus

LOG_2PI = math.log(2.0 * math.pi)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


@dataclass
class PredictionEnsemble:
    """K x N matrix of positive-class probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if self.probs.shape[0] < 1:
            raise ValueError("need at least one prediction row")
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0)


# --------------------------------------------------------------------------
# Feed-forward classifier
# --------------------------------------------------------------------------

def classifier_network(n_inputs: int, hidden_sizes, rng: RngStream, dropout_rate: float = 0.0) -> Network:
    sizes = [n_inputs, *hidden_sizes, 1]
    acts = ["relu"] * len(hidden_sizes) + ["linear"]
    return Network.create(sizes, acts, rng, dropout_rate)


@dataclass
class MlpModel:
    net: Network

    @property
    def n_inputs(self) -> int:
        return self.net.weights[0].shape[0]

    def logits(self, x, masks=None) -> np.ndarray:
        return self.net.predict(x, masks)[:, 0]

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))

    def sample(self, x, k: int, rng: RngStream) -> PredictionEnsemble:
        """``k`` forward passes with dropout active."""
        x = np.asarray(x, dtype=np.float64)
        rows = [sigmoid(self.logits(x, self.net.draw_masks(len(x), rng))) for _ in range(k)]
        return PredictionEnsemble(np.array(rows))


def mlp_loss_and_grad(net: Network, x, y, masks=None, penalty=None):
    """Mean BCE (plus optional penalty) and gradients in ``net.params()`` order."""
    out, cache = net.forward(x, masks)
    z = out[:, 0]
    n = len(y)
    loss = float(bce_with_logits(z, y).mean())
    dout = ((sigmoid(z) - y) / n)[:, None]
    gw, gb = net.backward(cache, dout, masks)
    grads = [*gw, *gb]
    if penalty is not None:
        p_val, p_grads = penalty(net)
        loss += p_val
        grads = [g + pg for g, pg in zip(grads, p_grads)]
    return loss, grads


def mean_bce(model, x, y) -> float:
    return float(bce_with_logits(model.logits(x), y).mean())


def train_mlp(
    config: TrainConfig,
    hidden_sizes,
    x_train,
    y_train,
    x_val,
    y_val,
    rng: RngStream,
    dropout_rate: float = 0.0,
    penalty=None,
    init: Network | None = None,
) -> tuple[MlpModel, TrainingTrace]:
    """Adam on mean BCE with dropout and early stopping on validation BCE.

    ``penalty(net) -> (value, grads)`` is added to every batch loss; the
    anchored ensemble uses it. Returns the best-validation parameters.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = _check_labels(y_train)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = _check_labels(y_val)
    net = init.copy() if init is not None else classifier_network(
        x_train.shape[1], hidden_sizes, rng.spawn("init"), dropout_rate)
    net.dropout_rate = float(dropout_rate)
    model = MlpModel(net)
    params = net.params()

    def batch_step(rows, brng):
        xb = x_train[rows]
        return mlp_loss_and_grad(net, xb, y_train[rows], net.draw_masks(len(rows), brng), penalty)

    def train_loss():
        loss = mean_bce(model, x_train, y_train)
        if penalty is not None:
            loss += penalty(net)[0]
        return loss

    trace = run_training(params, batch_step, train_loss, lambda: mean_bce(model, x_val, y_val),
                         len(x_train), config, rng.spawn("batches"))
    return model, trace


# --------------------------------------------------------------------------
# Temperature scaling
# --------------------------------------------------------------------------

@dataclass
class TemperatureScaledModel:
    base: MlpModel
    temperature: float = 1.0

    @property
    def n_inputs(self) -> int:
        return self.base.n_inputs

    def logits(self, x) -> np.ndarray:
        return self.base.logits(x) / self.temperature

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))


def fit_temperature_to_logits(logits, y, bounds=(0.05, 20.0), xtol: float = 1e-4) -> float:
    """Bounded scalar search for the temperature minimising mean BCE."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(y)
    if y.min() == y.max():
        raise ValueError("temperature fitting needs both classes in the validation set")

    def objective(t):
        return float(bce_with_logits(logits / t, y).mean())

    res = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": xtol})
    t = float(res.x)
    # never return something worse than leaving the model untouched
    if objective(t) > objective(1.0):
        return 1.0
    return t


def fit_temperature(model: MlpModel, x_val, y_val) -> TemperatureScaledModel:
    t = fit_temperature_to_logits(model.logits(x_val), y_val)
    return TemperatureScaledModel(model, t)


# --------------------------------------------------------------------------
# Logistic regression
# --------------------------------------------------------------------------

@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    C: float = 1.0
    converged: bool = True
    n_iter: int = 0

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[0]

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ValueError(f"expected input with {self.weights.shape[0]} columns, got shape {x.shape}")
        return x @ self.weights + self.bias

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))


def logreg_objective(w, b, x, y, C):
    """Summed BCE + ||w||^2 / (2C) and its gradient (bias unpenalised)."""
    z = x @ w + b
    loss = float(bce_with_logits(z, y).sum() + 0.5 * np.dot(w, w) / C)
    r = sigmoid(z) - y
    return loss, x.T @ r + w / C, float(r.sum())


def train_logreg(x, y, C: float, tol: float = 1e-6, max_iter: int = 100) -> LogRegModel:
    """Damped Newton iterations with Armijo backtracking.

    Stops when the gradient norm drops below ``tol``; hitting ``max_iter``
    sets ``converged=False`` and emits a warning instead of raising.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y)
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    loss, gw, gb = logreg_objective(w, b, x, y, C)
    xa = np.hstack([x, np.ones((n, 1))])
    ridge = np.append(np.full(d, 1.0 / C), 0.0)
    it = 0
    while it < max_iter:
        grad = np.append(gw, gb)
        if np.linalg.norm(grad) < tol:
            break
        it += 1
        p = sigmoid(xa[:, :d] @ w + b)
        hess = xa.T @ (xa * (p * (1.0 - p))[:, None])
        hess[np.diag_indices(d + 1)] += ridge
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        slope = float(grad @ step)
        t = 1.0
        while True:
            w_new, b_new = w - t * step[:d], b - t * step[d]
            new_loss, new_gw, new_gb = logreg_objective(w_new, b_new, x, y, C)
            if new_loss <= loss - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if new_loss > loss:
            break  # floating-point floor reached
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
    converged = bool(np.linalg.norm(np.append(gw, gb)) < tol)
    if not converged:
        warnings.warn(f"logistic regression did not reach gradient norm {tol} after {it} iterations",
                      RuntimeWarning, stacklevel=2)
    return LogRegModel(w, float(b), float(C), bool(converged), it)


# --------------------------------------------------------------------------
# Bayes-by-Backprop
# --------------------------------------------------------------------------

@dataclass
class MixturePrior:
    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.pi <= 1.0):
            raise ValueError("prior pi must lie in (0, 1]")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("prior scales must be positive")

    def log_density(self, w):
        """Pointwise log p(w) and d log p / dw."""
        w = np.asarray(w, dtype=np.float64)
        with np.errstate(divide="ignore"):
            la = math.log(self.pi) - 0.5 * LOG_2PI - math.log(self.sigma1) - 0.5 * (w / self.sigma1) ** 2
            lb = (math.log(1.0 - self.pi) if self.pi < 1.0 else -np.inf) \
                - 0.5 * LOG_2PI - math.log(self.sigma2) - 0.5 * (w / self.sigma2) ** 2
        lse = np.logaddexp(la, lb)
        ra = np.exp(la - lse)
        rb = np.exp(lb - lse)
        grad = -w * (ra / self.sigma1 ** 2 + rb / self.sigma2 ** 2)
        return lse, grad


@dataclass
class BbbModel:
    mu_w: list
    mu_b: list
    rho_w: list
    rho_b: list
    activations: list
    prior: MixturePrior = field(default_factory=MixturePrior)
    dropout_rate: float = 0.0

    @classmethod
    def create(cls, n_inputs, hidden_sizes, rng: RngStream, prior: MixturePrior | None = None,
               mu_init: float = 0.0, rho_init: float = -5.0, dropout_rate: float = 0.0,
               init_spread: float = 0.1) -> "BbbModel":
        sizes = [n_inputs, *hidden_sizes, 1]
        shapes_w = list(zip(sizes[:-1], sizes[1:]))
        mu_w = [rng.normal(mu_init, init_spread, size=s) for s in shapes_w]
        mu_b = [rng.normal(mu_init, init_spread, size=s[1]) for s in shapes_w]
        rho_w = [rng.normal(rho_init, init_spread, size=s) for s in shapes_w]
        rho_b = [rng.normal(rho_init, init_spread, size=s[1]) for s in shapes_w]
        acts = ["relu"] * len(hidden_sizes) + ["linear"]
        return cls(mu_w, mu_b, rho_w, rho_b, acts, prior or MixturePrior(), float(dropout_rate))

    @property
    def n_inputs(self) -> int:
        return self.mu_w[0].shape[0]

    def params(self) -> list:
        return [*self.mu_w, *self.mu_b, *self.rho_w, *self.rho_b]

    def draw_noise(self, rng: RngStream) -> list:
        return [rng.normal(size=p.shape) for p in (*self.mu_w, *self.mu_b)]

    def network(self, eps=None) -> Network:
        """Weights ``mu + softplus(rho) * eps``; posterior mean when ``eps`` is None."""
        n = len(self.mu_w)
        if eps is None:
            ws, bs = [m.copy() for m in self.mu_w], [m.copy() for m in self.mu_b]
        else:
            ws = [m + softplus(r) * e for m, r, e in zip(self.mu_w, self.rho_w, eps[:n])]
            bs = [m + softplus(r) * e for m, r, e in zip(self.mu_b, self.rho_b, eps[n:])]
        return Network(ws, bs, list(self.activations), self.dropout_rate)

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.network().predict(x)[:, 0])

    def logits(self, x) -> np.ndarray:
        return self.network().predict(x)[:, 0]

    def sample(self, x, k: int, rng: RngStream) -> PredictionEnsemble:
        """``k`` weight draws from the variational posterior."""
        x = np.asarray(x, dtype=np.float64)
        rows = [sigmoid(self.network(self.draw_noise(rng)).predict(x)[:, 0]) for _ in range(k)]
        return PredictionEnsemble(np.array(rows))


@dataclass
class BbbLoss:
    loss: float
    complexity: float
    nll: float
    grads: list


def bbb_loss(model: BbbModel, x, y, n_batches: int, rng: RngStream | None = None, eps=None, masks=None) -> BbbLoss:
    """One-sample minibatch ELBO: (log q(w) - log p(w)) / n_batches + summed BCE.

    Gradients are returned in ``model.params()`` order (mu_w, mu_b, rho_w, rho_b).
    """
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if eps is None:
        eps = model.draw_noise(rng)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    net = model.network(eps)
    out, cache = net.forward(x, masks)
    z = out[:, 0]
    nll = float(bce_with_logits(z, y).sum())
    gw, gb = net.backward(cache, (sigmoid(z) - y)[:, None], masks)

    mus = [*model.mu_w, *model.mu_b]
    rhos = [*model.rho_w, *model.rho_b]
    ws = [*net.weights, *net.biases]
    data_grads = [*gw, *gb]
    scale = 1.0 / n_batches
    complexity = 0.0
    g_mu, g_rho = [], []
    for mu, rho, w, e, gd in zip(mus, rhos, ws, eps, data_grads):
        sigma = softplus(rho)
        log_q = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * e * e
        log_p, dlogp = model.prior.log_density(w)
        complexity += float(np.sum(log_q - log_p))
        # total derivative through w = mu + sigma * eps
        dw = gd + scale * (-e / sigma - dlogp)
        g_mu.append(dw + scale * (e / sigma))
        dsigma = dw * e + scale * (-1.0 / sigma + e * e / sigma)
        g_rho.append(dsigma * sigmoid(rho))
    if not math.isfinite(complexity):
        raise FloatingPointError("non-finite log density in the variational complexity term")
    n_w = len(model.mu_w)
    grads = [*g_mu[:n_w], *g_mu[n_w:], *g_rho[:n_w], *g_rho[n_w:]]
    return BbbLoss(scale * complexity + nll, complexity, nll, grads)


def train_bbb(
    config: TrainConfig,
    hidden_sizes,
    x_train,
    y_train,
    x_val,
    y_val,
    rng: RngStream,
    prior: MixturePrior | None = None,
    mu_init: float = 0.0,
    rho_init: float = -5.0,
    dropout_rate: float = 0.0,
    n_eval_samples: int = 10,
) -> tuple[BbbModel, TrainingTrace]:
    """Adam on the minibatch ELBO; early stopping on the BCE of the
    MC-averaged validation prediction (fixed noise across epochs)."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = _check_labels(y_train)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = _check_labels(y_val)
    model = BbbModel.create(x_train.shape[1], hidden_sizes, rng.spawn("init"), prior,
                            mu_init, rho_init, dropout_rate)
    n = len(x_train)
    n_batches = max(1, math.ceil(n / config.batch_size))
    probe = model.network()

    def batch_step(rows, brng):
        masks = probe.draw_masks(len(rows), brng)
        res = bbb_loss(model, x_train[rows], y_train[rows], n_batches, brng, masks=masks)
        return res.loss, res.grads

    def train_loss():
        res = bbb_loss(model, x_train, y_train, 1, RngStream(rng.seed, "train-eval"))
        return res.loss / n

    def val_loss():
        p = model.sample(x_val, n_eval_samples, RngStream(rng.seed, "val-eval")).mean()
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        return float(-(y_val * np.log(p) + (1.0 - y_val) * np.log(1.0 - p)).mean())

    trace = run_training(model.params(), batch_step, train_loss, val_loss, n, config, rng.spawn("batches"))
    return model, trace


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------

ENSEMBLE_KINDS = ("plain", "bootstrapped", "anchored")


def bootstrap_rows(n: int, rng: RngStream) -> np.ndarray:
    """``n`` row indices drawn uniformly with replacement."""
    return rng.integers(0, n, size=n)


def anchor_scales(net: Network) -> list:
    """Prior scale sqrt(2 / rows) per parameter group, weights then biases."""
    return [math.sqrt(2.0 / p.shape[0]) for p in net.params()]


def anchored_penalty(params, anchors, lambdas, n_train: int, weight: float = 1.0):
    """Sum over groups of ||theta - anchor||^2 / (2 lambda^2 N) and its gradient."""
    value = 0.0
    grads = []
    for p, a, lam in zip(params, anchors, lambdas):
        diff = p - a
        c = weight / (2.0 * lam * lam * n_train)
        value += c * float(np.sum(diff * diff))
        grads.append(2.0 * c * diff)
    return value, grads


@dataclass
class EnsembleModel:
    kind: str
    members: list  # MlpModel
    anchors: list | None = None  # per member, list of arrays aligned with net.params()
    lambdas: list | None = None

    @property
    def n_inputs(self) -> int:
        return self.members[0].n_inputs

    def predict_proba(self, x) -> np.ndarray:
        return np.mean([m.predict_proba(x) for m in self.members], axis=0)

    def sample(self, x, k: int | None = None, rng: RngStream | None = None) -> PredictionEnsemble:
        if k is not None and k != len(self.members):
            raise ValueError(f"ensemble has {len(self.members)} members, cannot draw {k} predictions")
        return PredictionEnsemble(np.array([m.predict_proba(x) for m in self.members]))


def train_ensemble(
    kind: str,
    k: int,
    config: TrainConfig,
    hidden_sizes,
    x_train,
    y_train,
    x_val,
    y_val,
    rng: RngStream,
    dropout_rate: float = 0.0,
    penalty_weight: float = 1.0,
    shared_seed: bool = False,
) -> tuple[EnsembleModel, list]:
    """Train ``k`` members. ``shared_seed`` gives every member the same stream."""
    if kind not in ENSEMBLE_KINDS:
        raise ValueError(f"unknown ensemble kind {kind!r}")
    if k < 1:
        raise ValueError("ensemble needs at least one member")
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    n = len(x_train)
    members, traces, anchors = [], [], []
    lambdas = None
    for i in range(k):
        mrng = rng.spawn("member", 0 if shared_seed else i)
        xt, yt = x_train, y_train
        if kind == "bootstrapped":
            rows = bootstrap_rows(n, mrng.spawn("bootstrap"))
            xt, yt = x_train[rows], y_train[rows]
        penalty = None
        init = None
        if kind == "anchored":
            init = classifier_network(x_train.shape[1], hidden_sizes, mrng.spawn("init"), dropout_rate)
            lambdas = anchor_scales(init)
            arng = mrng.spawn("anchor")
            anchor = [arng.normal(0.0, lam, size=p.shape) for p, lam in zip(init.params(), lambdas)]
            anchors.append(anchor)

            def penalty(net, _a=anchor, _l=lambdas):
                return anchored_penalty(net.params(), _a, _l, n, penalty_weight)

        model, trace = train_mlp(config, hidden_sizes, xt, yt, x_val, y_val, mrng,
                                 dropout_rate=dropout_rate, penalty=penalty, init=init)
        members.append(model)
        traces.append(trace)
    return EnsembleModel(kind, members, anchors if kind == "anchored" else None, lambdas), traces


# --------------------------------------------------------------------------
# Dispatch helpers
# --------------------------------------------------------------------------

def predict_proba(model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ValueError(f"model expects {model.n_inputs} features, got shape {x.shape}")
    return model.predict_proba(x)


def sample_predictions(model, x, k: int | None, rng: RngStream) -> PredictionEnsemble:
    """Stochastic predictions: dropout passes, posterior weight draws or ensemble members.

    Deterministic models return their single prediction as a one-row ensemble.
    """
    if isinstance(model, EnsembleModel):
        return model.sample(x, k)
    if k is None or k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(model, (MlpModel, BbbModel)):
        return model.sample(x, k, rng)
    return PredictionEnsemble(predict_proba(model, x)[None, :])


__all__ = [
    "BbbLoss", "BbbModel", "EnsembleModel", "LogRegModel", "MixturePrior", "MlpModel",
    "PredictionEnsemble", "TemperatureScaledModel", "TrainConfig", "TrainingDiverged",
    "anchor_scales", "anchored_penalty", "bbb_loss", "bootstrap_rows", "classifier_network", "fit_temperature",
    "fit_temperature_to_logits", "logreg_objective", "mlp_loss_and_grad", "predict_proba",
    "sample_predictions", "train_bbb", "train_ensemble", "train_logreg", "train_mlp",
]
