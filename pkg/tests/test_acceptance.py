"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import toy_classification
from test_density import _naive_logpdf, _principal_angle
from test_discriminators import _assign, _net_grad_check
from test_evaluation import FIXED_PAIRS, brute_auc, quad_two_sided_p
from uqtab.cli import run_command
from uqtab.data import (
    DEFAULT_VARIABLES,
    Episode,
    GroupSpec,
    SyntheticCohortConfig,
    TabularDataset,
    engineer_features,
    generate_synthetic_cohort,
    split_dataset,
)
from uqtab.density import PpcaModel, autoencoder_network, fit_ppca, mse_loss_and_grad, train_autoencoder
from uqtab.discriminators import (
    BbbModel,
    MixturePrior,
    PredictionEnsemble,
    bbb_loss,
    classifier_network,
    fit_temperature,
    logreg_objective,
    mean_bce,
    mlp_loss_and_grad,
    train_mlp,
)
from uqtab.evaluation import auc_roc, welch_t_test
from uqtab.experiments import (
    MORTALITY_MODELS,
    SEARCH_SPACES,
    TRIAL_BUDGETS,
    Categorical,
    PreparedData,
    default_registry,
    evaluate_mortality,
    group_holdout_experiment,
    perturbation_experiment,
    random_search,
)
from uqtab.metrics import class1_std, mutual_information, predictive_entropy
from uqtab.nets import TrainConfig, flatten
from uqtab.numerics import RngStream, check_gradient

JOBS = min(4, os.cpu_count() or 1)


def _within(seconds, start):
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.1f}s, limit {seconds}s"


def _prepared(ds, seed):
    return PreparedData.from_dataset(ds, split_dataset(len(ds), rng=RngStream(seed).spawn("split")))


@pytest.mark.criterion(1, "feature schema has 588 columns")
def test_criterion_01_feature_schema():
    eps = generate_synthetic_cohort(SyntheticCohortConfig(n_patients=40, seed=0))
    # one stay with a single variable and one with a measurement exactly at 48h
    eps.append(Episode("sparse", 0, frozenset(), {"heart_rate": (np.array([3.0]), np.array([80.0]))}))
    eps.append(Episode("edge", 1, frozenset(), {"glucose": (np.array([0.0, 48.0]), np.array([5.0, 6.0]))}))
    start = time.perf_counter()
    fm = engineer_features(eps)
    _within(1.0, start)
    assert len(DEFAULT_VARIABLES) == 14
    assert fm.shape == (42, 588)
    assert len(set(fm.column_names)) == 588


@pytest.mark.criterion(2, "uncertainty metric unit values")
def test_criterion_02_metric_values():
    ens = lambda *c: PredictionEnsemble(np.array(c, dtype=float).T)
    assert abs(predictive_entropy(ens([0.0, 1.0])).values[0] - math.log(2)) < 1e-9
    assert abs(mutual_information(ens([0.37, 0.37, 0.37])).values[0]) < 1e-9
    assert abs(class1_std(ens([0.2, 0.4, 0.6])).values[0] - 0.163299) < 1e-6
    assert abs(class1_std(ens([0.2, 0.4, 0.6])).values[0] - math.sqrt(0.08 / 3)) < 1e-9


@pytest.mark.criterion(3, "AUC equals brute-force pair counting")
def test_criterion_03_auc_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for i in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, 6, size=n).astype(float) if i % 2 else rng.normal(size=n)
        assert auc_roc(scores, labels) == brute_auc(scores, labels)
    _within(10.0, start)


@pytest.mark.criterion(4, "analytic gradients match finite differences")
def test_criterion_04_gradients():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = RngStream(seed, "acceptance-grad")
        # MLP with a fixed dropout mask (37 parameters)
        net = classifier_network(4, [5, 2], rng.spawn("mlp"), dropout_rate=0.2)
        assert net.n_params <= 50
        x = rng.normal(size=(12, 4))
        y = (rng.uniform(size=12) < 0.5).astype(float)
        masks = net.draw_masks(12, rng.spawn("mask"))
        worst = max(worst, _net_grad_check(net, lambda: mlp_loss_and_grad(net, x, y, masks)).max_relative_error)
        # regularised logistic regression
        w, b = rng.normal(size=4), float(rng.normal())
        _, gw, gb = logreg_objective(w, b, x, y, 100.0)
        res = check_gradient(lambda t: logreg_objective(t[:4], t[4], x, y, 100.0)[0], np.append(gw, gb),
                             np.append(w, b))
        worst = max(worst, res.max_relative_error)
        # autoencoder MSE (4-3-2-3-4)
        ae = autoencoder_network(4, [3], 2, rng.spawn("ae"))
        assert ae.n_params <= 50
        worst = max(worst, _net_grad_check(ae, lambda: mse_loss_and_grad(ae, x)).max_relative_error)
        # Bayes by backprop with frozen noise (2 x 21 parameters)
        model = BbbModel.create(3, [4], rng.spawn("bbb"), MixturePrior(0.3, 1.1, 0.4), mu_init=0.0,
                                rho_init=-1.5, init_spread=0.5)
        xb = x[:, :3]
        eps = model.draw_noise(rng.spawn("eps"))
        params = model.params()
        theta0 = flatten(params)
        analytic = flatten(bbb_loss(model, xb, y, 4, eps=eps).grads)

        def f(theta):
            _assign(params, theta)
            return bbb_loss(model, xb, y, 4, eps=eps).loss

        worst = max(worst, check_gradient(f, analytic, theta0).max_relative_error)
        _assign(params, theta0)
    assert worst < 1e-4, worst
    _within(10.0, start)


@pytest.mark.criterion(5, "PPCA density and subspace oracles")
def test_criterion_05_ppca():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    for _ in range(40):
        d = int(rng.integers(2, 11))
        q = int(rng.integers(1, d))
        m = PpcaModel(rng.normal(size=d), rng.normal(size=(d, q)), float(rng.uniform(0.05, 3.0)), np.ones(q))
        x = 2 * rng.normal(size=(10, d))
        assert np.abs(m.log_likelihood(x) - _naive_logpdf(x, m.mean, m.covariance())).max() < 1e-8
        data = rng.normal(size=(300, d)) @ rng.normal(size=(d, d))
        fitted = fit_ppca(data, q)
        r = data - data.mean(axis=0)
        evals, evecs = np.linalg.eig(r.T @ r / len(data))
        top = evecs.real[:, np.argsort(evals.real)[::-1][:q]]
        assert _principal_angle(fitted.loadings, top) < 1e-6
        assert np.abs(fitted.log_likelihood(data[:10]) - _naive_logpdf(data[:10], fitted.mean,
                                                                       fitted.covariance())).max() < 1e-8
    _within(5.0, start)


@pytest.mark.criterion(6, "Welch t-test values and sign symmetry")
def test_criterion_06_welch():
    start = time.perf_counter()
    for a, b in FIXED_PAIRS:
        a, b = np.array(a), np.array(b)
        va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
        t = (a.mean() - b.mean()) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
        r = welch_t_test(a, b)
        assert abs(r.t_statistic - t) < 1e-6 and abs(r.degrees_of_freedom - df) < 1e-6
        assert abs(r.p_value - quad_two_sided_p(t, df)) < 1e-3
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    assert abs(r.t_statistic + 1.224745) < 1e-6 and abs(r.degrees_of_freedom - 4.0) < 1e-6
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = rng.normal(size=int(rng.integers(2, 40)))
        b = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=int(rng.integers(2, 40)))
        ab, ba = welch_t_test(a, b), welch_t_test(b, a)
        assert ab.t_statistic == -ba.t_statistic and ab.p_value == ba.p_value
    _within(5.0, start)


@pytest.mark.slow
@pytest.mark.criterion(7, "null experiments give AUC 0.5")
def test_criterion_07_null_calibration():
    start = time.perf_counter()
    cfg = SyntheticCohortConfig(n_patients=5000, seed=7, groups=(GroupSpec("null", 0.2, 0.0),))
    ds = TabularDataset.from_episodes(generate_synthetic_cohort(cfg))
    reg = default_registry()
    data = _prepared(ds, 7)
    pert = perturbation_experiment(reg, data, factors=(1.0,), repeats=5, rng=RngStream(7), jobs=JOBS)
    assert all(e["mean"] == 0.5 for e in pert.ood)
    hold = group_holdout_experiment(ds, reg, ["null"], n_runs=5, rng=RngStream(7), jobs=JOBS)
    off = {(e["model"], e["metric"]): round(e["mean"], 4) for e in hold.ood if abs(e["mean"] - 0.5) > 0.05}
    print("zero-shift group AUCs:", {(e["model"], e["metric"]): round(e["mean"], 3) for e in hold.ood})
    assert all(e["n"] == 5 for e in hold.ood)
    assert not off, off
    _within(300.0, start)


@pytest.mark.slow
@pytest.mark.criterion(8, "density models detect scaled features, softmax metrics do not")
def test_criterion_08_perturbation_pattern():
    start = time.perf_counter()
    ds = TabularDataset.from_episodes(generate_synthetic_cohort(SyntheticCohortConfig(n_patients=5000, seed=8)))
    data = _prepared(ds, 8)
    reg = default_registry(include=("NN", "PPCA", "AE"))
    rep = perturbation_experiment(reg, data, factors=(10.0, 100.0, 1000.0, 10000.0), repeats=100,
                                  rng=RngStream(8), jobs=1)
    print("perturbation AUCs:", {(e["model"], e["metric"], e["key"]): round(e["mean"], 3) for e in rep.ood})
    assert rep.lookup("PPCA", "novelty", "10000")["mean"] >= 0.99
    assert rep.lookup("AE", "novelty", "10000")["mean"] >= 0.95
    assert rep.lookup("NN", "max_prob", "10000")["mean"] < 0.7
    assert rep.lookup("NN", "entropy", "10000")["mean"] < 0.7
    _within(900.0, start)


def _check_ranges(kind, configs):
    # declared ranges, restated independently of the rule objects
    for c in configs:
        if "lr" in c:
            assert 1e-4 <= c["lr"] <= 0.1
        if "hidden_sizes" in c:
            hs = c["hidden_sizes"]
            assert 1 <= len(hs) <= 4 and len(set(hs)) == 1 and hs[0] in (25, 30, 50, 75, 100)
        if kind in ("NN", "MCDropout", "BBB"):
            assert 0.0 <= c["dropout_rate"] <= 0.5
        if kind == "BBB":
            assert -8.0 <= c["posterior_rho_init"] <= -2.0
            assert -0.6 <= c["posterior_mu_init"] <= 0.6
            assert 0.1 <= c["prior_pi"] <= 0.9
            for k in ("prior_sigma_1", "prior_sigma_2"):
                assert math.exp(-0.8) <= c[k] <= math.exp(0.1)
        if kind == "AE":
            assert c["latent_dim"] in (5, 10, 15, 20)


@pytest.mark.slow
@pytest.mark.criterion(9, "random search budgets, ranges and determinism")
def test_criterion_09_search_contract(small_data):
    start = time.perf_counter()
    assert {k: TRIAL_BUDGETS[k] for k in ("AE", "NN", "MCDropout", "BBB")} == \
        {"AE": 40, "NN": 40, "MCDropout": 40, "BBB": 60}
    one_epoch = {"max_epochs": Categorical((1,)), "patience": Categorical((1,))}
    for kind in ("AE", "NN", "MCDropout", "BBB"):
        res = random_search(kind, TRIAL_BUDGETS[kind], small_data, RngStream(9),
                            {**SEARCH_SPACES[kind], **one_epoch}, jobs=JOBS)
        assert len(res.trials) == TRIAL_BUDGETS[kind]
        _check_ranges(kind, [t.config for t in res.trials])
    for kind in ("NN", "BBB"):
        a = random_search(kind, 5, small_data, RngStream(90), jobs=JOBS)
        b = random_search(kind, 5, small_data, RngStream(90), jobs=1)
        _check_ranges(kind, [t.config for t in a.trials])
        assert a.to_dict() == b.to_dict()
        assert a.best_score == min(t.score for t in a.trials if t.error is None)
    _within(300.0, start)


@pytest.mark.criterion(10, "early stopping and temperature scaling contracts")
def test_criterion_10_training_contracts():
    start = time.perf_counter()
    x, y = toy_classification(400, 6, seed=10)
    xv, yv = toy_classification(150, 6, seed=11)
    for seed, lr in enumerate((0.3, 0.03, 0.003)):
        cfg = TrainConfig(learning_rate=lr, max_epochs=15, patience=3, batch_size=32)
        model, trace = train_mlp(cfg, [20], x, y, xv, yv, RngStream(seed), dropout_rate=0.2)
        assert abs(mean_bce(model, xv, yv) - min(trace.val_loss)) < 1e-12
        assert trace.best_val_loss == min(trace.val_loss)
        ae, atrace = train_autoencoder(cfg, [5], 3, x, xv, RngStream(seed))
        assert abs(np.mean(ae.novelty(xv)) - min(atrace.val_loss)) < 1e-12
        cal = fit_temperature(model, xv, yv)
        assert mean_bce(cal, xv, yv) <= mean_bce(model, xv, yv) + 1e-9
    _within(60.0, start)


def _pipeline(root, jobs):
    root.mkdir()
    data = ["--features", str(root / "features.csv"), "--labels", str(root / "labels.csv")]
    steps = [
        ["synth", "--n", "600", "--seed", "11", "--out", str(root)],
        ["featurize", "--timeseries", str(root / "timeseries.csv"), "--labels", str(root / "labels.csv"),
         "--out", str(root / "features.csv")],
        ["tune", *data, "--seed", "11", "--model", "NN,MCDropout,BBB,AE", "--budget", "2", "--jobs", str(jobs),
         "--out", str(root / "tuned.json")],
        ["perturb", *data, "--seed", "11", "--tuned", str(root / "tuned.json"), "--repeats", "5",
         "--jobs", str(jobs), "--out", str(root / "reports")],
    ]
    for argv in steps:
        assert run_command(argv) == 0, argv
    return (root / "reports" / "perturbation_seed11.json").read_bytes()


@pytest.mark.slow
@pytest.mark.criterion(11, "CLI pipeline is byte-identical across runs and worker counts")
def test_criterion_11_determinism(tmp_path):
    start = time.perf_counter()
    first = _pipeline(tmp_path / "a", 1)
    again = _pipeline(tmp_path / "b", 1)
    parallel = _pipeline(tmp_path / "c", 4)
    assert first == again
    assert first == parallel
    rep = json.loads(first)
    assert len(rep["ood"]) == 4 * 23  # 23 (model, metric) pairs per factor
    _within(600.0, start)


@pytest.mark.slow
@pytest.mark.criterion(12, "mortality report roster with mean and std over 5 runs")
def test_criterion_12_report_roster():
    start = time.perf_counter()
    ds = TabularDataset.from_episodes(generate_synthetic_cohort(SyntheticCohortConfig(n_patients=2000, seed=12)))
    rep = evaluate_mortality(default_registry(), _prepared(ds, 12), n_runs=5, rng=RngStream(12), jobs=JOBS)
    assert sorted(e["model"] for e in rep.mortality) == sorted(MORTALITY_MODELS)
    for e in rep.mortality:
        assert e["n"] == 5 and "std" in e and 0.0 <= e["mean"] <= 1.0
    lr = rep.mortality_for("LogReg")
    assert lr["std"] == 0.0
    print("mortality AUCs:", {e["model"]: (round(e["mean"], 3), round(e["std"], 3)) for e in rep.mortality})
    _within(600.0, start)
