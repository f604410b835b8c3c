"""Episode ingestion, synthetic cohorts, feature engineering, scaling and splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import RngStream, sigmoid

log = logging.getLogger(__name__)

HORIZON_HOURS = 48.0

# Shared ICU schema: the 14 variables available in both source databases.
DEFAULT_VARIABLES = (
    "diastolic_bp",
    "systolic_bp",
    "fio2",
    "gcs_verbal",
    "gcs_eyes",
    "gcs_motor",
    "gcs_total",
    "glucose",
    "heart_rate",
    "mean_bp",
    "o2_saturation",
    "respiratory_rate",
    "temperature",
    "ph",
)

# (name, start fraction, end fraction) of the 48h axis
WINDOWS = (
    ("full", 0.0, 1.0),
    ("first10", 0.0, 0.10),
    ("last10", 0.90, 1.0),
    ("first25", 0.0, 0.25),
    ("last25", 0.75, 1.0),
    ("first50", 0.0, 0.50),
    ("last50", 0.50, 1.0),
)
STATISTICS = ("min", "max", "mean", "std", "skew", "count")


class DataError(ValueError):
    pass


@dataclass
class Episode:
    patient_id: str
    label: int
    groups: frozenset = frozenset()
    series: dict = field(default_factory=dict)  # variable -> (times, values) float arrays

    def n_measurements(self) -> int:
        return sum(len(t) for t, _ in self.series.values())


@dataclass
class FeatureMatrix:
    values: np.ndarray
    column_names: list
    row_ids: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_ids), len(self.column_names)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.row_ids)} rows x {len(self.column_names)} columns"
            )

    @property
    def shape(self):
        return self.values.shape

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureMatrix(self.values[rows], list(self.column_names), [self.row_ids[i] for i in rows])

    def with_values(self, values) -> "FeatureMatrix":
        return FeatureMatrix(values, list(self.column_names), list(self.row_ids))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["patient_id", *self.column_names])
            for rid, row in zip(self.row_ids, self.values):
                writer.writerow([rid, *("" if np.isnan(v) else repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "FeatureMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "patient_id":
                raise DataError(f"{path}: first column must be patient_id")
            ids, rows = [], []
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
                ids.append(rec[0])
                rows.append([float(v) if v != "" else np.nan for v in rec[1:]])
        values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
        return cls(values, header[1:], ids)


def column_names(variables: Sequence[str]) -> list:
    return [f"{v}|{w}|{s}" for v in variables for w, _, _ in WINDOWS for s in STATISTICS]


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

@dataclass
class LoadResult:
    episodes: list
    out_of_window: int = 0
    skipped_empty: int = 0


def load_episodes(timeseries_path, labels_path) -> LoadResult:
    """Read the time-series and label CSVs into episodes.

    Measurements outside ``[0, 48]`` hours are dropped and counted; empty
    values are skipped. Duplicate measurements are kept in arrival order.
    """
    labels = {}
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "label", "groups"]:
            raise DataError(f"{labels_path}: expected header patient_id,label,groups, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise DataError(f"{labels_path}:{lineno}: malformed row")
            pid, lab, grp = rec
            if lab not in ("0", "1"):
                raise DataError(f"{labels_path}:{lineno}: label must be 0 or 1, got {lab!r}")
            tags = frozenset(t for t in grp.split(";") if t)
            labels[pid] = (int(lab), tags)

    raw: dict = {}
    order: list = []
    out_of_window = skipped = 0
    with open(timeseries_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "variable", "time_hours", "value"]:
            raise DataError(f"{timeseries_path}: expected header patient_id,variable,time_hours,value, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise DataError(f"{timeseries_path}:{lineno}: malformed row")
            pid, var, t_str, v_str = rec
            try:
                t = float(t_str)
                v = float(v_str) if v_str != "" else None
            except ValueError:
                raise DataError(f"{timeseries_path}:{lineno}: non-numeric time or value") from None
            if not math.isfinite(t) or (v is not None and not math.isfinite(v)):
                raise DataError(f"{timeseries_path}:{lineno}: non-finite time or value")
            if v is None:
                skipped += 1
                continue
            if t < 0.0 or t > HORIZON_HOURS:
                out_of_window += 1
                continue
            if pid not in raw:
                raw[pid] = {}
                order.append(pid)
            raw[pid].setdefault(var, []).append((t, v))

    if out_of_window:
        log.warning("dropped %d measurements outside the 48h window", out_of_window)

    episodes = []
    for pid in order:
        if pid not in labels:
            raise DataError(f"no label for patient {pid!r}")
        lab, tags = labels[pid]
        series = {}
        for var, pts in raw[pid].items():
            t = np.array([p[0] for p in pts])
            v = np.array([p[1] for p in pts])
            idx = np.argsort(t, kind="stable")
            series[var] = (t[idx], v[idx])
        episodes.append(Episode(pid, lab, tags, series))
    return LoadResult(episodes, out_of_window, skipped)


def write_episodes(episodes: Sequence[Episode], timeseries_path, labels_path) -> None:
    with open(timeseries_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "variable", "time_hours", "value"])
        for ep in episodes:
            for var, (times, vals) in ep.series.items():
                for t, v in zip(times, vals):
                    writer.writerow([ep.patient_id, var, repr(float(t)), repr(float(v))])
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "label", "groups"])
        for ep in episodes:
            writer.writerow([ep.patient_id, ep.label, ";".join(sorted(ep.groups))])


# --------------------------------------------------------------------------
# Synthetic cohorts
# --------------------------------------------------------------------------

# rough physiological (mean, sd) per variable, used only for realism of scales
_VARIABLE_SCALES = {
    "diastolic_bp": (60.0, 12.0),
    "systolic_bp": (120.0, 20.0),
    "fio2": (0.45, 0.12),
    "gcs_verbal": (3.5, 1.2),
    "gcs_eyes": (3.2, 0.8),
    "gcs_motor": (5.2, 1.0),
    "gcs_total": (12.0, 3.0),
    "glucose": (140.0, 40.0),
    "heart_rate": (88.0, 16.0),
    "mean_bp": (80.0, 13.0),
    "o2_saturation": (96.5, 2.5),
    "respiratory_rate": (19.0, 5.0),
    "temperature": (37.0, 0.6),
    "ph": (7.38, 0.07),
}


@dataclass
class GroupSpec:
    tag: str
    prevalence: float
    shift_scale: float = 0.0


@dataclass
class SyntheticCohortConfig:
    n_patients: int = 2000
    variables: tuple = DEFAULT_VARIABLES
    mortality_rate: float = 0.13
    groups: tuple = ()
    exclusive_groups: bool = True
    # latent-mean spread and within-stay noise, both in units of the variable sd
    latent_scale: float = 1.0
    noise_scale: float = 0.5
    ar_timescale_hours: float = 6.0
    # Poisson measurement rate per hour, drawn per variable in this range
    rate_range: tuple = (1.0, 3.0)
    # norm of the linear risk score weights on the latent means
    label_strength: float = 3.0
    # global shift of every latent mean, in sd units (domain shift between sites)
    domain_shift: float = 0.0
    seed: int = 0
    id_prefix: str = "p"

    def validate(self) -> None:
        if self.n_patients < 1:
            raise DataError("n_patients must be positive")
        if not 0.0 < self.mortality_rate < 1.0:
            raise DataError("mortality_rate must lie in (0, 1)")
        for g in self.groups:
            if not 0.0 <= g.prevalence <= 1.0:
                raise DataError(f"group {g.tag!r}: prevalence must lie in [0, 1]")
        if self.exclusive_groups and sum(g.prevalence for g in self.groups) > 1.0 + 1e-12:
            raise DataError("prevalences of mutually exclusive groups sum to more than 1")


def _calibrate_intercept(scores: np.ndarray, u: np.ndarray, target: float) -> float:
    """Bisection on the intercept so the realised event rate hits ``target``."""
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = np.mean(u < sigmoid(scores + mid))
        if rate < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_cohort(config: SyntheticCohortConfig) -> list:
    """Simulate ICU stays with group-dependent latent means and a logistic mortality label.

    Each patient has a latent mean per variable; group membership adds a fixed
    offset direction times the group's ``shift_scale``. Series are an AR(1)
    process around that mean sampled at Poisson times within 48 hours.
    """
    config.validate()
    root = RngStream(config.seed, "synthetic-cohort")
    n, variables = config.n_patients, list(config.variables)
    n_var = len(variables)

    # fixed cohort-level structure
    structure = root.spawn("structure")
    beta = structure.normal(size=n_var)
    beta *= config.label_strength / np.linalg.norm(beta)
    group_dirs = []
    for j, g in enumerate(config.groups):
        d = root.spawn("group-direction", j).normal(size=n_var)
        group_dirs.append(d / np.linalg.norm(d) * math.sqrt(n_var))
    rates = structure.uniform(*config.rate_range, size=n_var)
    domain_dir = root.spawn("domain-direction").normal(size=n_var)
    domain_dir = domain_dir / np.linalg.norm(domain_dir) * math.sqrt(n_var)

    membership = np.zeros((n, len(config.groups)), dtype=bool)
    mem_rng = root.spawn("membership")
    if config.groups:
        if config.exclusive_groups:
            cum = np.cumsum([g.prevalence for g in config.groups])
            u = mem_rng.uniform(size=n)
            which = np.searchsorted(cum, u, side="right")
            for j in range(len(config.groups)):
                membership[:, j] = which == j
        else:
            for j, g in enumerate(config.groups):
                membership[:, j] = mem_rng.uniform(size=n) < g.prevalence

    latent = root.spawn("latent").normal(scale=config.latent_scale, size=(n, n_var))
    latent += config.domain_shift * domain_dir
    for j, g in enumerate(config.groups):
        latent[membership[:, j]] += g.shift_scale * group_dirs[j]

    score = latent @ beta
    u = root.spawn("label").uniform(size=n)
    intercept = _calibrate_intercept(score, u, config.mortality_rate)
    labels = (u < sigmoid(score + intercept)).astype(int)

    phi_tau = config.ar_timescale_hours
    width = len(str(max(n - 1, 0)))
    episodes = []
    for i in range(n):
        prng = root.spawn("patient", i)
        series = {}
        for k, var in enumerate(variables):
            count = prng.poisson(rates[k] * HORIZON_HOURS)
            times = np.sort(prng.uniform(0.0, HORIZON_HOURS, size=count))
            if count == 0:
                continue
            gaps = np.diff(times, prepend=times[0])
            phi = np.exp(-gaps / phi_tau)
            eta = prng.normal(size=count)
            x = np.empty(count)
            x[0] = eta[0]
            for m in range(1, count):
                x[m] = phi[m] * x[m - 1] + math.sqrt(1.0 - phi[m] ** 2) * eta[m]
            mu, sd = _VARIABLE_SCALES.get(var, (0.0, 1.0))
            series[var] = (times, mu + sd * (latent[i, k] + config.noise_scale * x))
        if not series:
            # guarantee at least one measurement per stay
            var = variables[0]
            mu, sd = _VARIABLE_SCALES.get(var, (0.0, 1.0))
            series[var] = (np.array([prng.uniform(0.0, HORIZON_HOURS)]), np.array([mu + sd * latent[i, 0]]))
        tags = frozenset(g.tag for j, g in enumerate(config.groups) if membership[i, j])
        episodes.append(Episode(f"{config.id_prefix}{i:0{width}d}", int(labels[i]), tags, series))
    return episodes


# --------------------------------------------------------------------------
# Feature engineering
# --------------------------------------------------------------------------

def _window_stats(vals: np.ndarray) -> tuple:
    n = vals.size
    if n == 0:
        return (np.nan, np.nan, np.nan, np.nan, np.nan, 0.0)
    mean = vals.mean()
    if n < 2:
        return (vals[0], vals[0], mean, 0.0, 0.0, 1.0)
    dev = vals - mean
    m2 = np.dot(dev, dev) / n
    std = math.sqrt(m2)
    skew = 0.0
    if n >= 3 and m2 > 0.0:
        skew = (np.dot(dev * dev, dev) / n) / m2 ** 1.5
    return (vals.min(), vals.max(), mean, std, skew, float(n))


def engineer_features(episodes: Sequence[Episode], variables: Sequence[str] = DEFAULT_VARIABLES) -> FeatureMatrix:
    """Six statistics on seven time windows per variable.

    Windows are half-open ``[start, end)`` on the hours axis; the last
    bound of a window ending at 48h is closed so that t=48 is included.
    Empty windows give missing values except for the count, which is 0.
    """
    if not variables:
        raise DataError("variables must be non-empty")
    variables = list(variables)
    n_stats = len(STATISTICS)
    out = np.empty((len(episodes), len(variables) * len(WINDOWS) * n_stats))
    # rounded so that e.g. 10% of 48h is exactly 4.8, not 4.800000000000001
    bounds = [(round(lo * HORIZON_HOURS, 9), round(hi * HORIZON_HOURS, 9)) for _, lo, hi in WINDOWS]
    empty = np.empty(0)
    for r, ep in enumerate(episodes):
        col = 0
        for var in variables:
            times, vals = ep.series.get(var, (empty, empty))
            for lo, hi in bounds:
                a = np.searchsorted(times, lo, side="left")
                b = len(times) if hi >= HORIZON_HOURS else np.searchsorted(times, hi, side="left")
                out[r, col:col + n_stats] = _window_stats(vals[a:b])
                col += n_stats
    return FeatureMatrix(out, column_names(variables), [ep.patient_id for ep in episodes])


# --------------------------------------------------------------------------
# Scaling, splitting, corruption
# --------------------------------------------------------------------------

@dataclass
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    impute: np.ndarray

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.std + self.mean


def fit_scaler(features, train_rows=None) -> ScalerStats:
    """Column statistics on training rows; missing cells are ignored."""
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if train_rows is not None:
        x = x[np.asarray(train_rows, dtype=np.int64)]
    if x.shape[0] < 2:
        raise DataError("need at least 2 training rows to fit a scaler")
    observed = ~np.isnan(x)
    n_obs = observed.sum(axis=0)
    filled = np.where(observed, x, 0.0)
    safe_n = np.maximum(n_obs, 1)
    mean = np.where(n_obs > 0, filled.sum(axis=0) / safe_n, 0.0)
    dev = np.where(observed, x - mean, 0.0)
    std = np.sqrt((dev * dev).sum(axis=0) / safe_n)
    std = np.where(std < 1e-12, 1.0, std)
    return ScalerStats(mean=mean, std=std, impute=mean.copy())


def apply_scaler(stats: ScalerStats, features):
    if isinstance(features, FeatureMatrix):
        return features.with_values(apply_scaler(stats, features.values))
    x = np.asarray(features, dtype=np.float64)
    x = np.where(np.isnan(x), stats.impute, x)
    return (x - stats.mean) / stats.std


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_dataset(n_rows: int, ratios=(0.70, 0.15, 0.15), rng: RngStream | None = None) -> DatasetSplit:
    """Random permutation cut into train/validation/test.

    Validation and test sizes are ``floor(ratio * n)``; the remainder goes to train.
    """
    if n_rows < 3:
        raise DataError("need at least 3 rows to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError("ratios must be three non-negative numbers summing to 1")
    rng = rng if rng is not None else RngStream(0, "split")
    perm = rng.permutation(n_rows)
    n_val = int(math.floor(ratios[1] * n_rows + 1e-9))
    n_test = int(math.floor(ratios[2] * n_rows + 1e-9))
    n_train = n_rows - n_val - n_test
    return DatasetSplit(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


def perturb_feature(features, column: int, factor: float):
    """Copy with one (standardized) column multiplied by ``factor``."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    if isinstance(features, FeatureMatrix):
        return features.with_values(perturb_feature(features.values, column, factor))
    x = np.array(features, dtype=np.float64, copy=True)
    if not 0 <= column < x.shape[1]:
        raise IndexError(f"column {column} out of range for {x.shape[1]} columns")
    x[:, column] *= factor
    return x


# --------------------------------------------------------------------------
# Labelled tabular datasets used by the experiments
# --------------------------------------------------------------------------

@dataclass
class TabularDataset:
    """Raw (unscaled) features plus labels and group tags, row-aligned."""

    features: FeatureMatrix
    labels: np.ndarray
    groups: list  # frozenset per row

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.features.shape[0] or len(self.groups) != self.features.shape[0]:
            raise DataError("features, labels and groups must have the same number of rows")

    def __len__(self):
        return len(self.labels)

    def group_mask(self, tag: str) -> np.ndarray:
        return np.array([tag in g for g in self.groups], dtype=bool)

    @classmethod
    def from_episodes(cls, episodes, variables=DEFAULT_VARIABLES) -> "TabularDataset":
        fm = engineer_features(episodes, variables)
        return cls(fm, np.array([e.label for e in episodes]), [frozenset(e.groups) for e in episodes])

    @classmethod
    def from_files(cls, features_path, labels_path) -> "TabularDataset":
        fm = FeatureMatrix.from_csv(features_path)
        lab = {}
        with open(labels_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                lab[rec["patient_id"]] = (int(rec["label"]), frozenset(t for t in rec["groups"].split(";") if t))
        missing = [r for r in fm.row_ids if r not in lab]
        if missing:
            raise DataError(f"no label for patient {missing[0]!r}")
        return cls(fm, np.array([lab[r][0] for r in fm.row_ids]), [lab[r][1] for r in fm.row_ids])

