"""Shared plumbing for the experiment scripts: cohort generation, tuning, tables."""

from __future__ import annotations

import argparse
import time
from dataclasses import dataclass, field
from pathlib import Path

from uqtab.data import GroupSpec, SyntheticCohortConfig, TabularDataset, generate_synthetic_cohort, split_dataset
from uqtab.experiments import PreparedData, default_registry, random_search
from uqtab.numerics import RngStream
from uqtab.report import write_report


@dataclass
class ScriptConfig:
    n_patients: int = 3000
    seed: int = 0
    runs: int = 1
    jobs: int = 1
    members: int = 10
    samples: int = 10
    # random-search budget per tunable model; 0 keeps the built-in defaults
    tune_budget: int = 0
    tune: tuple = ("BBB",)
    out: str = "results"
    groups: tuple = field(default_factory=tuple)


def base_parser(description: str, **defaults) -> argparse.ArgumentParser:
    cfg = ScriptConfig(**defaults)
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--n-patients", type=int, default=cfg.n_patients)
    p.add_argument("--seed", type=int, default=cfg.seed)
    p.add_argument("--runs", type=int, default=cfg.runs)
    p.add_argument("--jobs", type=int, default=cfg.jobs)
    p.add_argument("--members", type=int, default=cfg.members)
    p.add_argument("--samples", type=int, default=cfg.samples)
    p.add_argument("--tune-budget", type=int, default=cfg.tune_budget,
                   help="random-search trials before the experiment (0 = use defaults)")
    p.add_argument("--tune", default=",".join(cfg.tune), help="comma-separated model kinds to tune")
    p.add_argument("--out", default=cfg.out)
    return p


def cohort(n: int, seed: int, groups=(), **kw) -> TabularDataset:
    t0 = time.perf_counter()
    cfg = SyntheticCohortConfig(n_patients=n, seed=seed, groups=tuple(GroupSpec(*g) for g in groups), **kw)
    ds = TabularDataset.from_episodes(generate_synthetic_cohort(cfg))
    print(f"cohort: {len(ds)} stays, {ds.features.shape[1]} features, "
          f"{ds.labels.mean():.1%} positive ({time.perf_counter() - t0:.1f}s)")
    return ds


def prepare(ds: TabularDataset, seed: int) -> PreparedData:
    return PreparedData.from_dataset(ds, split_dataset(len(ds), rng=RngStream(seed).spawn("split")))


def registry(args, data: PreparedData, include=None):
    tuned = {}
    if args.tune_budget > 0:
        for kind in filter(None, args.tune.split(",")):
            res = random_search(kind, args.tune_budget, data, RngStream(args.seed).spawn("search").spawn(kind),
                                jobs=args.jobs)
            tuned[kind] = res.best_config
            print(f"tuned {kind}: val loss {res.best_score:.4f}")
    return default_registry(tuned, n_members=args.members, n_samples=args.samples, include=include)


def print_table(report, mortality: bool = False) -> None:
    rows = report.mortality if mortality else report.ood
    keys = list(dict.fromkeys(e["key"] for e in rows))
    width = max(len(f"{e['model']}/{e.get('metric', '')}") for e in rows) + 2
    print("".ljust(width) + "".join(k[:12].rjust(14) for k in keys))
    cells = {}
    for e in rows:
        name = e["model"] if mortality else f"{e['model']}/{e['metric']}"
        std = f"±{e['std']:.2f}" if e.get("std") is not None else ""
        cells.setdefault(name, {})[e["key"]] = f"{e['mean']:.3f}{std}"
    for name, vals in cells.items():
        print(name.ljust(width) + "".join(vals.get(k, "-").rjust(14) for k in keys))


def save(report, out: str) -> None:
    Path(out).mkdir(parents=True, exist_ok=True)
    paths = write_report(report, out)
    print("wrote", ", ".join(map(str, paths)))
