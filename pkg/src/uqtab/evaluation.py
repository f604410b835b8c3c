"""AUC-ROC (classification and OOD detection), Welch's t-test and group-difference summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EvaluationError(ValueError):
    pass


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError("scores and labels must be 1-d arrays of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both classes present")
    if np.any(np.isnan(scores)):
        raise EvaluationError("scores contain NaN")
    rank_sum = _average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ood_auc(id_scores, ood_scores) -> float:
    """AUC of separating OOD (label 1) from in-distribution rows by uncertainty."""
    id_scores = np.ravel(np.asarray(id_scores, dtype=np.float64))
    ood_scores = np.ravel(np.asarray(ood_scores, dtype=np.float64))
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EvaluationError("ood_auc needs non-empty in- and out-of-distribution scores")
    labels = np.r_[np.zeros(id_scores.size, dtype=int), np.ones(ood_scores.size, dtype=int)]
    return auc_roc(np.r_[id_scores, ood_scores], labels)


# --------------------------------------------------------------------------
# Student t distribution via the regularized incomplete beta function
# --------------------------------------------------------------------------

def _beta_cf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not math.isfinite(t):
        return 0.0
    return min(1.0, max(0.0, betainc(0.5 * df, 0.5, df / (df + t * t))))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class WelchResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    degenerate: bool = False


def welch_t_test(a, b) -> WelchResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite df."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise EvaluationError("each sample needs at least 2 values")
    va = a.var(ddof=1) / na
    vb = b.var(ddof=1) / nb
    se2 = va + vb
    if se2 <= 0.0:
        return WelchResult(0.0, float(na + nb - 2), 1.0, degenerate=True)
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (na - 1) + vb * vb / (nb - 1))
    return WelchResult(float(t), float(df), t_two_sided_p(float(t), float(df)))


def significant_feature_fraction(x_id, x_ood, alpha: float = 0.01) -> float:
    """Fraction of columns whose Welch p-value is below ``alpha``.

    A column counts as not significant when either side has fewer than two
    observed values or zero variance.
    """
    names_id = getattr(x_id, "column_names", None)
    names_ood = getattr(x_ood, "column_names", None)
    if names_id is not None and names_ood is not None and list(names_id) != list(names_ood):
        raise EvaluationError("feature schemas differ")
    a = np.asarray(getattr(x_id, "values", x_id), dtype=np.float64)
    b = np.asarray(getattr(x_ood, "values", x_ood), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise EvaluationError("feature schemas differ")
    if a.shape[1] == 0:
        return 0.0
    hits = 0
    for j in range(a.shape[1]):
        ca = a[:, j][~np.isnan(a[:, j])]
        cb = b[:, j][~np.isnan(b[:, j])]
        if ca.size < 2 or cb.size < 2 or ca.var() == 0.0 or cb.var() == 0.0:
            continue
        if welch_t_test(ca, cb).p_value < alpha:
            hits += 1
    return hits / a.shape[1]
