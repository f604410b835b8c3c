"""Model registry, random hyperparameter search and the OOD-detection protocols."""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics as M
from .data import DataError, DatasetSplit, TabularDataset, apply_scaler, fit_scaler, perturb_feature, split_dataset
from .density import fit_ppca, train_autoencoder
from .discriminators import (
    MixturePrior,
    fit_temperature,
    sample_predictions,
    train_bbb,
    train_ensemble,
    train_logreg,
    train_mlp,
)
from .evaluation import auc_roc, ood_auc, significant_feature_fraction
from .nets import TrainConfig, TrainingDiverged
from .numerics import RngStream, bce_with_logits
from .report import ExperimentReport

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Search space
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Categorical:
    options: tuple

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, v) -> bool:
        return v in self.options


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))

    def contains(self, v) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def contains(self, v) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class HiddenSizes:
    """1 to ``max_layers`` hidden layers, all of one width drawn from ``widths``."""

    widths: tuple = (25, 30, 50, 75, 100)
    max_layers: int = 4

    def sample(self, rng):
        n = int(rng.integers(1, self.max_layers + 1))
        return [int(self.widths[int(rng.integers(len(self.widths)))])] * n

    def contains(self, v) -> bool:
        return 1 <= len(v) <= self.max_layers and all(w in self.widths for w in v)


_NN_SPACE = {
    "hidden_sizes": HiddenSizes(),
    "dropout_rate": Uniform(0.0, 0.5),
    "lr": LogUniform(1e-4, 0.1),
}

SEARCH_SPACES = {
    "NN": dict(_NN_SPACE),
    "MCDropout": dict(_NN_SPACE),
    "BBB": {
        **_NN_SPACE,
        "posterior_rho_init": Uniform(-8.0, -2.0),
        "posterior_mu_init": Uniform(-0.6, 0.6),
        "prior_pi": Uniform(0.1, 0.9),
        "prior_sigma_1": Uniform(math.exp(-0.8), math.exp(0.1)),
        "prior_sigma_2": Uniform(math.exp(-0.8), math.exp(0.1)),
    },
    "AE": {
        "hidden_sizes": HiddenSizes(),
        "latent_dim": Categorical((5, 10, 15, 20)),
        "lr": LogUniform(1e-4, 0.1),
    },
    "LogReg": {"C": Categorical((10.0, 100.0, 1000.0, 10000.0))},
}

TRIAL_BUDGETS = {"AE": 40, "NN": 40, "MCDropout": 40, "BBB": 60, "LogReg": 4}


def sample_config(space: dict, rng) -> dict:
    return {name: rule.sample(rng) for name, rule in space.items()}


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------

# best values from a search on a large ICU cohort; used until a search overrides them
DEFAULT_PARAMS = {
    "NN": {"hidden_sizes": [30], "dropout_rate": 0.157483, "lr": 0.000538},
    "MCDropout": {"hidden_sizes": [50], "dropout_rate": 0.333312, "lr": 0.000526},
    "BBB": {
        "hidden_sizes": [25, 25, 25], "dropout_rate": 0.177533, "lr": 0.002418,
        "posterior_mu_init": 0.22187, "posterior_rho_init": -5.982621,
        "prior_pi": 0.233419, "prior_sigma_1": 0.740818, "prior_sigma_2": 0.606531,
    },
    "LogReg": {"C": 10.0},
    "AE": {"hidden_sizes": [75], "latent_dim": 15, "lr": 0.006897},
    "PPCA": {"n_components": 15},
}

FAMILY_METRICS = {
    "nn": M.SINGLE_METRICS,
    "platt": M.SINGLE_METRICS,
    "logreg": M.SINGLE_METRICS,
    "mcdropout": M.SAMPLED_METRICS,
    "bbb": M.SAMPLED_METRICS,
    "ensemble": M.SAMPLED_METRICS,
    "ppca": M.DENSITY_METRICS,
    "ae": M.DENSITY_METRICS,
}

MORTALITY_MODELS = ("AnchoredNNEnsemble", "BBB", "BootstrappedNNEnsemble", "LogReg", "MCDropout",
                    "NNEnsemble", "NN", "PlattScalingNN")


@dataclass
class ModelSpec:
    name: str
    family: str
    params: dict = field(default_factory=dict)
    metrics: tuple = ()
    # family "custom": fit(data, rng) -> object with scores(x) -> dict and optional predict_proba
    fit: Callable | None = None

    @property
    def is_classifier(self) -> bool:
        return self.family not in ("ppca", "ae") and (self.family != "custom" or bool(self.params.get("classifier")))


def default_registry(tuned: dict | None = None, n_members: int = 10, n_samples: int = 10,
                     include: tuple | None = None) -> list:
    """The ten benchmarked models. ``tuned`` maps search kinds (NN, BBB, ...) to configs;
    the NN config is shared with the temperature-scaled variant and all ensembles."""
    p = copy.deepcopy(DEFAULT_PARAMS)
    for kind, cfg in (tuned or {}).items():
        p.setdefault(kind, {}).update(cfg)
    nn = p["NN"]
    reg = [
        ModelSpec("AnchoredNNEnsemble", "ensemble", {**nn, "kind": "anchored", "n_members": n_members}),
        ModelSpec("BBB", "bbb", {**p["BBB"], "n_samples": n_samples}),
        ModelSpec("BootstrappedNNEnsemble", "ensemble", {**nn, "kind": "bootstrapped", "n_members": n_members}),
        ModelSpec("LogReg", "logreg", dict(p["LogReg"])),
        ModelSpec("MCDropout", "mcdropout", {**p["MCDropout"], "n_samples": n_samples}),
        ModelSpec("NNEnsemble", "ensemble", {**nn, "kind": "plain", "n_members": n_members}),
        ModelSpec("NN", "nn", dict(nn)),
        ModelSpec("PlattScalingNN", "platt", dict(nn)),
        ModelSpec("PPCA", "ppca", dict(p["PPCA"])),
        ModelSpec("AE", "ae", dict(p["AE"])),
    ]
    for spec in reg:
        spec.metrics = FAMILY_METRICS[spec.family]
    if include is not None:
        unknown = set(include) - {s.name for s in reg}
        if unknown:
            raise ExperimentError(f"unknown model(s): {', '.join(sorted(unknown))}")
        reg = [s for s in reg if s.name in include]
    return reg


# --------------------------------------------------------------------------
# Prepared data and per-model fit / score
# --------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Standardized train/validation/test arrays plus the scaler that produced them."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    scaler: object = None

    @classmethod
    def from_dataset(cls, ds: TabularDataset, split: DatasetSplit, exclude: np.ndarray | None = None) -> "PreparedData":
        keep = np.ones(len(ds), dtype=bool) if exclude is None else ~exclude
        tr = split.train[keep[split.train]]
        va = split.validation[keep[split.validation]]
        te = split.test[keep[split.test]]
        scaler = fit_scaler(ds.features, tr)
        x = apply_scaler(scaler, ds.features.values)
        y = ds.labels.astype(np.float64)
        return cls(x[tr], y[tr], x[va], y[va], x[te], y[te], scaler)


def _train_config(params: dict, seed: int = 0) -> TrainConfig:
    return TrainConfig(learning_rate=float(params.get("lr", 1e-3)), max_epochs=int(params.get("max_epochs", 10)),
                       patience=int(params.get("patience", 3)), batch_size=int(params.get("batch_size", 256)),
                       seed=seed)


def fit_model(spec: ModelSpec, data: PreparedData, rng: RngStream):
    """Train one registry entry; returns the fitted model and a validation loss."""
    p = spec.params
    cfg = _train_config(p, rng.seed)
    if spec.family in ("nn", "mcdropout", "platt"):
        model, trace = train_mlp(cfg, p["hidden_sizes"], data.x_train, data.y_train, data.x_val, data.y_val,
                                 rng, dropout_rate=p.get("dropout_rate", 0.0))
        if spec.family == "platt":
            model = fit_temperature(model, data.x_val, data.y_val)
            return model, float(bce_with_logits(model.logits(data.x_val), data.y_val).mean())
        return model, trace.best_val_loss
    if spec.family == "logreg":
        model = train_logreg(data.x_train, data.y_train, float(p["C"]))
        return model, float(bce_with_logits(model.logits(data.x_val), data.y_val).mean())
    if spec.family == "bbb":
        prior = MixturePrior(p["prior_pi"], p["prior_sigma_1"], p["prior_sigma_2"])
        model, trace = train_bbb(cfg, p["hidden_sizes"], data.x_train, data.y_train, data.x_val, data.y_val, rng,
                                 prior, p["posterior_mu_init"], p["posterior_rho_init"], p.get("dropout_rate", 0.0))
        return model, trace.best_val_loss
    if spec.family == "ensemble":
        model, traces = train_ensemble(p["kind"], int(p["n_members"]), cfg, p["hidden_sizes"], data.x_train,
                                       data.y_train, data.x_val, data.y_val, rng,
                                       dropout_rate=p.get("dropout_rate", 0.0))
        return model, float(np.mean([t.best_val_loss for t in traces]))
    if spec.family == "ppca":
        model = fit_ppca(data.x_train, int(p["n_components"]))
        return model, float(np.mean(model.novelty(data.x_val)))
    if spec.family == "ae":
        model, trace = train_autoencoder(cfg, p["hidden_sizes"], int(p["latent_dim"]), data.x_train, data.x_val,
                                         rng, dropout_rate=p.get("dropout_rate", 0.0))
        return model, trace.best_val_loss
    if spec.family == "custom":
        return spec.fit(data, rng), 0.0
    raise ExperimentError(f"unknown model family {spec.family!r}")


def score_model(spec: ModelSpec, model, x, seed: int) -> tuple:
    """Uncertainty scores per metric and the mean positive-class probability (or None).

    Stochastic predictions draw from a fresh stream seeded by ``seed`` on
    every call, so identical inputs always receive identical scores.
    """
    rng = RngStream(seed, "score")
    fam = spec.family
    if fam in ("nn", "platt", "logreg"):
        p = model.predict_proba(x)
        return M.ensemble_scores(p[None, :], spec.metrics), p
    if fam in ("mcdropout", "bbb", "ensemble"):
        k = None if fam == "ensemble" else int(spec.params.get("n_samples", 10))
        ens = sample_predictions(model, x, k, rng)
        return M.ensemble_scores(ens, spec.metrics), ens.mean()
    if fam in ("ppca", "ae"):
        return {"novelty": model.novelty(x)}, None
    if fam == "custom":
        proba = model.predict_proba(x) if hasattr(model, "predict_proba") else None
        return model.scores(x), proba
    raise ExperimentError(f"unknown model family {fam!r}")


def _safe_auc(scores, labels):
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        return float("nan")
    return auc_roc(scores, labels)


# --------------------------------------------------------------------------
# Parallel map with deterministic ordering
# --------------------------------------------------------------------------

def run_units(fn, units, jobs: int = 1) -> list:
    """Apply ``fn`` to each unit; results come back in unit order regardless of ``jobs``."""
    units = list(units)
    if jobs <= 1 or len(units) <= 1:
        return [fn(u) for u in units]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, units))


# --------------------------------------------------------------------------
# Random search
# --------------------------------------------------------------------------

@dataclass
class Trial:
    index: int
    config: dict
    score: float
    error: str | None = None


@dataclass
class SearchResult:
    kind: str
    best_config: dict
    best_score: float
    trials: list

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "best_config": self.best_config,
            "best_score": self.best_score,
            "trials": [{"index": t.index, "config": t.config, "score": t.score if math.isfinite(t.score) else None,
                        "error": t.error} for t in self.trials],
        }


_SEARCH_FAMILY = {"NN": "nn", "MCDropout": "mcdropout", "BBB": "bbb", "AE": "ae", "LogReg": "logreg"}


def _search_defaults(kind: str) -> dict:
    extra = {"BBB": {"n_samples": 10}, "MCDropout": {"n_samples": 10}}.get(kind, {})
    return dict(extra)


def _run_trial(unit):
    kind, index, config, data, seed = unit
    spec = ModelSpec(kind, _SEARCH_FAMILY[kind], {**_search_defaults(kind), **config})
    try:
        _, score = fit_model(spec, data, RngStream(seed, "trial", index))
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        return Trial(index, config, float("inf"), str(exc))
    if not math.isfinite(score):
        return Trial(index, config, float("inf"), "non-finite validation loss")
    return Trial(index, config, float(score))


def random_search(kind: str, budget: int, data: PreparedData, rng: RngStream, space: dict | None = None,
                  jobs: int = 1) -> SearchResult:
    """Independent random configurations, each trained with the standard regime;
    the lowest validation loss wins (ties go to the earliest trial)."""
    if budget < 1:
        raise ExperimentError("budget must be >= 1")
    if kind not in _SEARCH_FAMILY:
        raise ExperimentError(f"no search space for model kind {kind!r}")
    space = SEARCH_SPACES[kind] if space is None else space
    configs = [sample_config(space, rng.spawn("config", i)) for i in range(budget)]
    units = [(kind, i, c, data, rng.seed) for i, c in enumerate(configs)]
    trials = run_units(_run_trial, units, jobs)
    ok = [t for t in trials if t.error is None]
    if not ok:
        raise ExperimentError("all trials diverged: " + ", ".join(str(t.index) for t in trials))
    best = min(ok, key=lambda t: (t.score, t.index))
    return SearchResult(kind, best.config, best.score, trials)


# --------------------------------------------------------------------------
# Mortality
# --------------------------------------------------------------------------

def _mortality_unit(unit):
    spec, data, seed, run = unit
    model, _ = fit_model(spec, data, RngStream(seed, f"model/{spec.name}", run))
    _, proba = score_model(spec, model, data.x_test, derive_unit_seed(seed, spec.name, run))
    return _safe_auc(proba, data.y_test)


def derive_unit_seed(seed: int, name: str, run: int) -> int:
    return RngStream(seed, f"score/{name}", run).seed


def evaluate_mortality(registry, data: PreparedData, n_runs: int = 5, rng: RngStream | None = None,
                       jobs: int = 1, config: dict | None = None) -> ExperimentReport:
    """Test-set AUC-ROC per classifier, mean and std over ``n_runs`` training seeds."""
    if n_runs < 1:
        raise ExperimentError("n_runs must be >= 1")
    rng = rng or RngStream(0)
    specs = [s for s in registry if s.is_classifier]
    units = [(s, data, rng.seed, r) for s in specs for r in range(n_runs)]
    aucs = run_units(_mortality_unit, units, jobs)
    report = ExperimentReport("mortality", rng.master_seed, n_runs, config or {})
    for i, s in enumerate(specs):
        report.add_mortality(s.name, "test", aucs[i * n_runs:(i + 1) * n_runs])
    return report


# --------------------------------------------------------------------------
# Perturbation
# --------------------------------------------------------------------------

DEFAULT_FACTORS = (10.0, 100.0, 1000.0, 10000.0)


def perturbation_columns(n_columns: int, factors, repeats: int, rng: RngStream) -> list:
    """Per factor, ``repeats`` distinct columns drawn without replacement."""
    if repeats > n_columns:
        raise ExperimentError(f"repeats ({repeats}) exceeds the number of features ({n_columns})")
    return [rng.spawn("columns", i).choice(n_columns, size=repeats, replace=False).tolist()
            for i in range(len(factors))]


def _perturbation_unit(unit):
    spec, data, seed, run, factors, columns = unit
    model, _ = fit_model(spec, data, RngStream(seed, f"model/{spec.name}", run))
    score_seed = derive_unit_seed(seed, spec.name, run)
    base, _ = score_model(spec, model, data.x_test, score_seed)
    out = {}
    for fi, factor in enumerate(factors):
        for col in columns[fi]:
            pert, _ = score_model(spec, model, perturb_feature(data.x_test, col, factor), score_seed)
            for metric in base:
                out.setdefault((fi, metric), []).append(ood_auc(base[metric], pert[metric]))
    return out


def _fmt_factor(f) -> str:
    f = float(f)
    return str(int(f)) if f.is_integer() else repr(f)


def perturbation_experiment(registry, data: PreparedData, factors=DEFAULT_FACTORS, repeats: int = 100,
                            rng: RngStream | None = None, n_runs: int = 1, jobs: int = 1,
                            config: dict | None = None) -> ExperimentReport:
    """Scale one standardized test column at a time and measure how well each
    uncertainty metric separates the corrupted copy from the original test set."""
    rng = rng or RngStream(0)
    columns = perturbation_columns(data.x_test.shape[1], factors, repeats, rng.spawn("perturbation"))
    units = [(s, data, rng.seed, r, tuple(factors), columns) for s in registry for r in range(n_runs)]
    results = run_units(_perturbation_unit, units, jobs)
    cfg = {"factors": [float(f) for f in factors], "repeats": repeats, "columns": columns, **(config or {})}
    report = ExperimentReport("perturbation", rng.master_seed, n_runs, cfg)
    for si, s in enumerate(registry):
        runs = results[si * n_runs:(si + 1) * n_runs]
        for fi, factor in enumerate(factors):
            for metric in s.metrics:
                vals = [v for r in runs for v in r[(fi, metric)]]
                report.add_ood(s.name, metric, _fmt_factor(factor), vals)
    return report


# --------------------------------------------------------------------------
# Group hold-out
# --------------------------------------------------------------------------

def _holdout_unit(unit):
    spec, data, x_ood, y_ood, seed, run, tag = unit
    model, _ = fit_model(spec, data, RngStream(seed, f"model/{tag}/{spec.name}", run))
    score_seed = derive_unit_seed(seed, f"{tag}/{spec.name}", run)
    id_scores, _ = score_model(spec, model, data.x_test, score_seed)
    ood_scores, proba = score_model(spec, model, x_ood, score_seed)
    aucs = {m: ood_auc(id_scores[m], ood_scores[m]) for m in id_scores}
    mort = _safe_auc(proba, y_ood) if proba is not None else None
    return aucs, mort


def group_holdout_experiment(dataset: TabularDataset, registry, group_tags, n_runs: int = 5,
                             rng: RngStream | None = None, jobs: int = 1, ratios=(0.70, 0.15, 0.15),
                             config: dict | None = None) -> ExperimentReport:
    """Remove each group from training, then compare uncertainty on the
    in-distribution test rows with uncertainty on the held-out group."""
    rng = rng or RngStream(0)
    split = split_dataset(len(dataset), ratios, rng.spawn("split"))
    units, meta = [], []
    for tag in group_tags:
        mask = dataset.group_mask(tag)
        if not mask.any():
            raise ExperimentError(f"group {tag!r} has no rows")
        data = PreparedData.from_dataset(dataset, split, exclude=mask)
        if len(np.unique(data.y_train)) < 2:
            raise ExperimentError(f"removing group {tag!r} leaves a single class in training")
        if len(data.y_test) == 0:
            raise ExperimentError(f"removing group {tag!r} leaves no in-distribution test rows")
        x_all = apply_scaler(data.scaler, dataset.features.values)
        x_ood = x_all[mask]
        y_ood = dataset.labels[mask].astype(np.float64)
        meta.append({
            "group": tag,
            "n_rows": int(mask.sum()),
            "relative_size": float(mask.sum() / len(split.train)),
            "significant_fraction": significant_feature_fraction(data.x_train, x_ood, 0.01),
        })
        units += [(s, data, x_ood, y_ood, rng.seed, r, tag) for s in registry for r in range(n_runs)]
    results = run_units(_holdout_unit, units, jobs)
    report = ExperimentReport("holdout", rng.master_seed, n_runs, {"groups": list(group_tags), **(config or {})},
                              groups=meta)
    pos = 0
    for tag in group_tags:
        for s in registry:
            runs = results[pos:pos + n_runs]
            pos += n_runs
            for metric in s.metrics:
                report.add_ood(s.name, metric, tag, [r[0][metric] for r in runs])
            if s.is_classifier:
                report.add_mortality(s.name, tag, [r[1] for r in runs])
    return report


# --------------------------------------------------------------------------
# Cross-dataset
# --------------------------------------------------------------------------

def _cross_unit(unit):
    spec, data, x_target, y_target, seed, run, key = unit
    model, _ = fit_model(spec, data, RngStream(seed, f"model/{key}/{spec.name}", run))
    score_seed = derive_unit_seed(seed, f"{key}/{spec.name}", run)
    id_scores, _ = score_model(spec, model, data.x_test, score_seed)
    ood_scores, proba = score_model(spec, model, x_target, score_seed)
    aucs = {m: ood_auc(id_scores[m], ood_scores[m]) for m in id_scores}
    return aucs, (_safe_auc(proba, y_target) if proba is not None else None)


def cross_dataset_experiment(dataset_a: TabularDataset, dataset_b: TabularDataset, registry, n_runs: int = 5,
                             rng: RngStream | None = None, jobs: int = 1, names=("A", "B"),
                             ratios=(0.70, 0.15, 0.15), config: dict | None = None) -> ExperimentReport:
    """Train on one dataset and treat the whole other dataset as OOD, in both directions."""
    if list(dataset_a.features.column_names) != list(dataset_b.features.column_names):
        raise DataError("feature schemas of the two datasets differ")
    rng = rng or RngStream(0)
    directions = [(dataset_a, dataset_b, f"{names[0]}->{names[1]}"), (dataset_b, dataset_a, f"{names[1]}->{names[0]}")]
    units = []
    for src, tgt, key in directions:
        split = split_dataset(len(src), ratios, rng.spawn("split", 0 if src is dataset_a else 1))
        data = PreparedData.from_dataset(src, split)
        x_target = apply_scaler(data.scaler, tgt.features.values)
        units += [(s, data, x_target, tgt.labels.astype(np.float64), rng.seed, r, key)
                  for s in registry for r in range(n_runs)]
    results = run_units(_cross_unit, units, jobs)
    report = ExperimentReport("crossdata", rng.master_seed, n_runs,
                              {"directions": [d[2] for d in directions], **(config or {})})
    pos = 0
    for _, _, key in directions:
        for s in registry:
            runs = results[pos:pos + n_runs]
            pos += n_runs
            for metric in s.metrics:
                report.add_ood(s.name, metric, key, [r[0][metric] for r in runs])
            if s.is_classifier:
                report.add_mortality(s.name, key, [r[1] for r in runs])
    return report
