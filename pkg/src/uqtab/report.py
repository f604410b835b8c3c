"""Experiment reports: fixed-order JSON plus a flat CSV for plotting tools."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_HEADER = ("experiment", "model", "metric", "group_or_factor", "mean", "std", "n")
MORTALITY_METRIC = "mortality_auc"


def summarize(values) -> dict:
    """Mean, sample std (only with >= 2 values) and count; NaNs are dropped."""
    vals = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    out = {"mean": float(vals.mean()) if vals.size else None}
    if vals.size >= 2:
        # identical values (deterministic models) give exactly 0, not rounding noise from the mean
        out["std"] = 0.0 if np.all(vals == vals[0]) else float(vals.std(ddof=1))
    out["n"] = int(vals.size)
    return out


@dataclass
class ExperimentReport:
    kind: str
    master_seed: int
    n_runs: int
    config: dict = field(default_factory=dict)
    ood: list = field(default_factory=list)        # {model, metric, key, mean, [std], n}
    mortality: list = field(default_factory=list)  # {model, key, mean, [std], n}
    groups: list = field(default_factory=list)     # {group, relative_size, significant_fraction, n_rows}

    def add_ood(self, model: str, metric: str, key: str, values) -> None:
        self.ood.append({"model": model, "metric": metric, "key": str(key), **summarize(values)})

    def add_mortality(self, model: str, key: str, values) -> None:
        self.mortality.append({"model": model, "key": str(key), **summarize(values)})

    def lookup(self, model: str, metric: str, key) -> dict:
        for e in self.ood:
            if e["model"] == model and e["metric"] == metric and e["key"] == str(key):
                return e
        raise KeyError((model, metric, key))

    def mortality_for(self, model: str, key="test") -> dict:
        for e in self.mortality:
            if e["model"] == model and e["key"] == str(key):
                return e
        raise KeyError((model, key))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "master_seed": self.master_seed,
            "n_runs": self.n_runs,
            "config": self.config,
            "groups": self.groups,
            "mortality": self.mortality,
            "ood": self.ood,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["kind"], d["master_seed"], d["n_runs"], d.get("config", {}), list(d.get("ood", [])),
                   list(d.get("mortality", [])), list(d.get("groups", [])))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> list:
        rows = []
        for e in self.ood:
            rows.append((self.kind, e["model"], e["metric"], e["key"], e["mean"], e.get("std"), e["n"]))
        for e in self.mortality:
            rows.append((self.kind, e["model"], MORTALITY_METRIC, e["key"], e["mean"], e.get("std"), e["n"]))
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.csv_rows())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(report: ExperimentReport, directory) -> tuple:
    """Write ``<kind>_seed<seed>.json`` and ``.csv`` into ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"report directory {directory} does not exist")
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"report directory {directory} is not writable")
    stem = f"{report.kind}_seed{report.master_seed}"
    json_path = directory / f"{stem}.json"
    csv_path = directory / f"{stem}.csv"
    _atomic_write(json_path, report.to_json())
    _atomic_write(csv_path, report.to_csv())
    return json_path, csv_path
