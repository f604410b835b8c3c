"""Uncertainty and novelty scores, all oriented so that larger means more uncertain."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .discriminators import PredictionEnsemble
from .numerics import binary_entropy


@dataclass
class UncertaintyScores:
    metric_name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def to_csv(self, path, row_ids) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row_id", "metric", "value"])
            for rid, v in zip(row_ids, self.values):
                writer.writerow([rid, self.metric_name, repr(float(v))])


def _probs(ens) -> np.ndarray:
    if isinstance(ens, PredictionEnsemble):
        return ens.probs
    return np.atleast_2d(np.asarray(ens, dtype=np.float64))


def max_prob_uncertainty(probs) -> UncertaintyScores:
    """One minus the larger of the two class probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    return UncertaintyScores("max_prob", 1.0 - np.maximum(p, 1.0 - p))


def class1_std(ens) -> UncertaintyScores:
    """Population standard deviation of the positive-class probability across predictions."""
    return UncertaintyScores("std", _probs(ens).std(axis=0))


def predictive_entropy(ens) -> UncertaintyScores:
    """Entropy (nats) of the averaged prediction."""
    return UncertaintyScores("entropy", binary_entropy(_probs(ens).mean(axis=0)))


def mutual_information(ens) -> UncertaintyScores:
    """Entropy of the mean minus the mean of member entropies, clipped at zero."""
    p = _probs(ens)
    mi = binary_entropy(p.mean(axis=0)) - binary_entropy(p).mean(axis=0)
    return UncertaintyScores("mutual_information", np.maximum(mi, 0.0))


def density_novelty(model, features) -> UncertaintyScores:
    """Negative log-likelihood for PPCA, reconstruction error for the autoencoder."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    return UncertaintyScores("novelty", model.novelty(x))


SINGLE_METRICS = ("max_prob", "entropy")
SAMPLED_METRICS = ("std", "entropy", "mutual_information")
DENSITY_METRICS = ("novelty",)


def ensemble_scores(ens, metrics=SAMPLED_METRICS) -> dict:
    fns = {
        "std": class1_std,
        "entropy": predictive_entropy,
        "mutual_information": mutual_information,
        "max_prob": lambda e: max_prob_uncertainty(_probs(e).mean(axis=0)),
    }
    return {m: fns[m](ens).values for m in metrics}
