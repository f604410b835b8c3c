import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import integrate

from uqtab.data import FeatureMatrix
from uqtab.evaluation import (
    EvaluationError,
    auc_roc,
    betainc,
    ood_auc,
    significant_feature_fraction,
    t_cdf,
    t_two_sided_p,
    welch_t_test,
)


def brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_two_sided_p(t, df):
    tail, _ = integrate.quad(t_pdf, abs(t), np.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)
    return 2 * tail


# ---- AUC -----------------------------------------------------------------------

def test_auc_examples():
    assert auc_roc(np.array([0.8, 0.9, 0.1, 0.2]), np.array([1, 1, 0, 0])) == 1.0
    assert auc_roc(np.full(6, 0.3), np.array([1, 0, 1, 0, 1, 0])) == 0.5
    assert auc_roc(np.array([0.5, 0.95, 0.1, 0.9]), np.array([1, 1, 0, 0])) == 0.75


def test_auc_single_class_error():
    with pytest.raises(EvaluationError):
        auc_roc(np.array([0.1, 0.2]), np.array([1, 1]))


def test_auc_matches_brute_force_random_instances():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        if i % 2:
            scores = rng.integers(0, 5, size=n).astype(float)  # heavy ties
        else:
            scores = rng.normal(size=n)
        assert auc_roc(scores, labels) == brute_auc(scores, labels)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60, unique=True), st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance_and_complement(scores, seed):
    s = np.array(scores)
    labels = np.random.default_rng(seed).integers(0, 2, size=len(s))
    labels[0], labels[1] = 0, 1
    a = auc_roc(s, labels)
    g = np.exp(s / 1e6) * 3 + 1
    # only a valid test when the transform stays strictly increasing in floating point
    assume(len(np.unique(g)) == len(g))
    assert auc_roc(g, labels) == a
    assert auc_roc(2.0 * s, labels) == a
    assert abs(a + auc_roc(-s, labels) - 1.0) < 1e-12


def test_ood_auc_examples():
    assert ood_auc([0.1, 0.2], [0.5, 0.6]) == 1.0
    assert ood_auc([0.3, 0.1, 0.7], [0.7, 0.3, 0.1]) == 0.5
    assert ood_auc([0.1, 0.9], [0.5, 0.95]) == 0.75
    with pytest.raises(EvaluationError):
        ood_auc([], [0.1])


# ---- Welch's t-test ------------------------------------------------------------------

def test_welch_hand_values():
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    assert abs(r.t_statistic - (-1.224745)) < 1e-6
    assert abs(r.degrees_of_freedom - 4.0) < 1e-6
    assert abs(r.p_value - 0.2879) < 1e-3
    assert abs(r.p_value - quad_two_sided_p(r.t_statistic, r.degrees_of_freedom)) < 1e-9


FIXED_PAIRS = [
    ([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]),
    ([10.1, 9.8, 10.4, 10.0, 9.9], [11.2, 10.9, 11.8, 11.0]),
    ([0.0, 5.0, -3.0, 2.0, 8.0, 1.0], [1.0, 1.5]),
    ([100.0, 101.0, 99.5, 100.5], [90.0, 120.0, 80.0, 115.0, 95.0, 105.0, 100.0]),
]


@pytest.mark.parametrize("a,b", FIXED_PAIRS)
def test_welch_fixed_pairs_against_oracle(a, b):
    a, b = np.array(a), np.array(b)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    r = welch_t_test(a, b)
    assert abs(r.t_statistic - t) < 1e-6
    assert abs(r.degrees_of_freedom - df) < 1e-6
    assert abs(r.p_value - quad_two_sided_p(t, df)) < 1e-3


def test_welch_identical_samples():
    r = welch_t_test([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    assert r.t_statistic == 0.0 and r.p_value == 1.0


def test_welch_zero_variance_flagged():
    r = welch_t_test([2.0, 2.0, 2.0], [2.0, 2.0])
    assert r.degenerate and r.t_statistic == 0.0 and r.p_value == 1.0


def test_welch_too_few_values():
    with pytest.raises(EvaluationError):
        welch_t_test([1.0], [1.0, 2.0])


def test_welch_sign_symmetry_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.normal(size=int(rng.integers(2, 30)))
        b = rng.normal(loc=rng.normal(), size=int(rng.integers(2, 30)))
        ab, ba = welch_t_test(a, b), welch_t_test(b, a)
        assert ab.t_statistic == -ba.t_statistic
        assert ab.p_value == ba.p_value
        assert 0.0 <= ab.p_value <= 1.0 and ab.degrees_of_freedom > 0


@pytest.mark.parametrize("df", [1.0, 2.5, 4.0, 17.3, 200.0])
@pytest.mark.parametrize("t", [0.0, 0.3, 1.5, 4.0, 12.0])
def test_t_tail_against_quadrature(t, df):
    assert abs(t_two_sided_p(t, df) - quad_two_sided_p(t, df)) < 1e-10
    assert abs(t_cdf(-t, df) - quad_two_sided_p(t, df) / 2) < 1e-10


def test_betainc_special_cases():
    assert betainc(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-14)
    assert betainc(2.0, 3.0, 0.0) == 0.0 and betainc(2.0, 3.0, 1.0) == 1.0
    # I_x(a, 1) = x^a
    assert betainc(3.5, 1.0, 0.4) == pytest.approx(0.4**3.5, rel=1e-12)


# ---- significant feature fraction --------------------------------------------------------

def test_fraction_shift_and_identity():
    x = np.random.default_rng(0).normal(size=(50, 8))
    assert significant_feature_fraction(x, x + 100) == 1.0
    assert significant_feature_fraction(x, x.copy()) == 0.0


def test_fraction_under_null_resampling():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 40))
    fracs = [significant_feature_fraction(x, x[rng.integers(0, 400, size=200)]) for _ in range(20)]
    assert np.mean(fracs) <= 0.05


def test_fraction_degenerate_columns_not_significant():
    a = np.column_stack([np.ones(10), np.arange(10.0)])
    b = np.column_stack([np.full(10, 5.0), np.arange(10.0) + 100])
    assert significant_feature_fraction(a, b) == 0.5


def test_fraction_schema_mismatch():
    a = FeatureMatrix(np.zeros((3, 2)), ["a", "b"], ["1", "2", "3"])
    b = FeatureMatrix(np.zeros((3, 2)), ["a", "c"], ["1", "2", "3"])
    with pytest.raises(EvaluationError):
        significant_feature_fraction(a, b)
    with pytest.raises(EvaluationError):
        significant_feature_fraction(np.zeros((3, 2)), np.zeros((3, 3)))
