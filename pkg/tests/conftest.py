import numpy as np
import pytest
from hypothesis import settings

from uqtab.data import SyntheticCohortConfig, TabularDataset, generate_synthetic_cohort, split_dataset
from uqtab.experiments import PreparedData
from uqtab.numerics import RngStream

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    eps = generate_synthetic_cohort(SyntheticCohortConfig(n_patients=400, seed=21, label_strength=4.0))
    return TabularDataset.from_episodes(eps)


@pytest.fixture(scope="session")
def small_data(small_dataset):
    split = split_dataset(len(small_dataset), rng=RngStream(3).spawn("split"))
    return PreparedData.from_dataset(small_dataset, split)


def toy_classification(n=300, d=5, seed=0, strength=3.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    p = 1.0 / (1.0 + np.exp(-strength * x @ w / np.linalg.norm(w)))
    y = (rng.uniform(size=n) < p).astype(np.float64)
    return x, y


# ---- acceptance summary --------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    prev = _CRITERIA.get(number)
    ok = rep.passed and (prev is None or prev[1])
    _CRITERIA[number] = (title, ok, rep.duration + (prev[2] if prev else 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f}s)")
