"""Command-line entry point: ``uqtab <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Runtime errors print a
single ``uqtab: error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    GroupSpec,
    SyntheticCohortConfig,
    TabularDataset,
    engineer_features,
    generate_synthetic_cohort,
    load_episodes,
    split_dataset,
    write_episodes,
)
from .experiments import (
    DEFAULT_FACTORS,
    SEARCH_SPACES,
    TRIAL_BUDGETS,
    PreparedData,
    cross_dataset_experiment,
    default_registry,
    evaluate_mortality,
    fit_model,
    group_holdout_experiment,
    perturbation_experiment,
    random_search,
)
from .numerics import RngStream
from .persistence import save_model
from .report import ExperimentReport, rows_to_csv, write_report

ENV_SEED = "UQTAB_SEED"


class UsageError(Exception):
    pass


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _group_specs(text: str) -> list:
    """``tag:prevalence:shift`` entries separated by commas."""
    out = []
    for item in _str_list(text):
        parts = item.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"group spec must be tag:prevalence:shift, got {item!r}")
        try:
            out.append([parts[0], float(parts[1]), float(parts[2])])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad numbers in group spec {item!r}") from None
    return out


def _common(p: argparse.ArgumentParser, jobs: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"master seed (falls back to ${ENV_SEED}, then 0)")
    p.add_argument("--config", metavar="FILE", default=None, help="flat JSON file with option defaults")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes (output is independent of this)")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", required=True, help="feature CSV written by `featurize`")
    p.add_argument("--labels", required=True, help="labels CSV (patient_id,label,groups)")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", type=_str_list, default=None,
                   help="comma-separated registry names (default: all applicable)")
    p.add_argument("--tuned", default=None, help="JSON written by `tune` with best configurations")
    p.add_argument("--members", type=int, default=10, help="ensemble size")
    p.add_argument("--samples", type=int, default=10, help="stochastic forward passes for MC dropout / BBB")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uqtab", description="Uncertainty / OOD-detection benchmark on ICU-style tabular data.")
    parser.add_argument("--version", action="version", version=f"uqtab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic cohort as CSV files")
    _common(p)
    p.add_argument("--n", type=int, default=2000, help="number of patients")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mortality-rate", type=float, default=0.13, help="target fraction of positive labels")
    p.add_argument("--groups", type=_group_specs, default=[], help="tag:prevalence:shift[,...]")
    p.add_argument("--domain-shift", type=float, default=0.0, help="global latent mean shift in sd units")
    p.add_argument("--label-strength", type=float, default=3.0, help="norm of the latent risk weights")
    p.add_argument("--id-prefix", default="p", help="prefix for generated patient ids")

    p = sub.add_parser("featurize", help="engineer the windowed summary features")
    _common(p)
    p.add_argument("--timeseries", required=True, help="time-series CSV")
    p.add_argument("--labels", required=True, help="labels CSV")
    p.add_argument("--out", required=True, help="feature CSV to write")

    p = sub.add_parser("tune", help="random hyperparameter search")
    _common(p, jobs=True)
    _data_args(p)
    p.add_argument("--model", type=_str_list, required=True, help=f"one or more of {','.join(SEARCH_SPACES)}")
    p.add_argument("--budget", type=int, default=None, help="trials per model (default: 40/60 per model kind)")
    p.add_argument("--out", required=True, help="JSON file; existing entries for other models are kept")

    p = sub.add_parser("train", help="train one model and save it")
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--model", required=True, help="registry name, e.g. NN or PPCA")
    p.add_argument("--out", required=True, help="model container file")

    p = sub.add_parser("eval", help="mortality AUC-ROC table")
    _common(p, jobs=True)
    _data_args(p)
    _model_args(p)
    p.add_argument("--runs", type=int, default=5, help="repeated runs with fresh model seeds")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("perturb", help="feature-scaling corruption experiment")
    _common(p, jobs=True)
    _data_args(p)
    _model_args(p)
    p.add_argument("--factors", type=_float_list, default=list(DEFAULT_FACTORS), help="comma-separated scale factors")
    p.add_argument("--repeats", type=int, default=100, help="perturbed columns per factor")
    p.add_argument("--runs", type=int, default=1, help="repeated runs with fresh model seeds")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("holdout", help="clinical group hold-out experiment")
    _common(p, jobs=True)
    _data_args(p)
    _model_args(p)
    p.add_argument("--groups", type=_str_list, required=True, help="comma-separated group tags")
    p.add_argument("--runs", type=int, default=5, help="repeated runs with fresh model seeds")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("crossdata", help="whole other dataset as OOD, both directions")
    _common(p, jobs=True)
    _model_args(p)
    p.add_argument("--features-a", required=True, help="feature CSV of dataset A")
    p.add_argument("--labels-a", required=True, help="labels CSV of dataset A")
    p.add_argument("--features-b", required=True, help="feature CSV of dataset B")
    p.add_argument("--labels-b", required=True, help="labels CSV of dataset B")
    p.add_argument("--names", type=_str_list, default=["A", "B"], help="display names of the two datasets")
    p.add_argument("--runs", type=int, default=5, help="repeated runs with fresh model seeds")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("report", help="merge JSON reports into one flat CSV")
    _common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", required=True, help="CSV file to write")
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv) -> argparse.Namespace:
    """Parse with precedence: command-line flags > ``--config`` file > defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.exit(2, f"uqtab: error: cannot read config {args.config}: {exc}\n")
        if not isinstance(file_cfg, dict):
            parser.exit(2, "uqtab: error: config file must hold a JSON object\n")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(file_cfg) - known)
        if unknown:
            sub.error(f"unknown config key(s): {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in file_cfg.items()})
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(ENV_SEED)
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            parser.error(f"${ENV_SEED} must be an integer, got {env!r}")
    return args


def run_config(args: argparse.Namespace) -> dict:
    """The parsed options as a flat, JSON-serialisable dict (the config file format)."""
    return {k: v for k, v in vars(args).items() if k not in ("config",)}


# --------------------------------------------------------------------------
# command implementations
# --------------------------------------------------------------------------

def _load_tuned(path) -> dict | None:
    if not path:
        return None
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc.get("tuned", doc)


def _registry(args, classifiers_only: bool = False):
    reg = default_registry(_load_tuned(args.tuned), n_members=args.members, n_samples=args.samples,
                           include=tuple(args.models) if args.models else None)
    if classifiers_only:
        reg = [s for s in reg if s.is_classifier]
    return reg


def _snapshot(args, *keys) -> dict:
    """Experiment parameters recorded in reports (no paths or worker counts)."""
    snap = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    if getattr(args, "tuned", None):
        snap["tuned"] = _load_tuned(args.tuned)
    return snap


def _prepared(args) -> PreparedData:
    ds = TabularDataset.from_files(args.features, args.labels)
    split = split_dataset(len(ds), rng=RngStream(args.seed).spawn("split"))
    return PreparedData.from_dataset(ds, split)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SyntheticCohortConfig(
        n_patients=args.n, mortality_rate=args.mortality_rate,
        groups=tuple(GroupSpec(t, p, s) for t, p, s in args.groups),
        domain_shift=args.domain_shift, label_strength=args.label_strength, seed=args.seed,
        id_prefix=args.id_prefix,
    )
    episodes = generate_synthetic_cohort(cfg)
    write_episodes(episodes, out / "timeseries.csv", out / "labels.csv")
    print(f"wrote {len(episodes)} patients to {out}")
    return 0


def cmd_featurize(args) -> int:
    res = load_episodes(args.timeseries, args.labels)
    fm = engineer_features(res.episodes)
    fm.to_csv(args.out)
    print(f"wrote {fm.shape[0]} rows x {fm.shape[1]} features to {args.out}"
          + (f" ({res.out_of_window} measurements outside 48h dropped)" if res.out_of_window else ""))
    return 0


def cmd_tune(args) -> int:
    data = _prepared(args)
    out = Path(args.out)
    doc = json.loads(out.read_text(encoding="utf-8")) if out.exists() else {"tuned": {}, "searches": {}}
    root = RngStream(args.seed)
    for kind in args.model:
        if kind not in SEARCH_SPACES:
            raise UsageError(f"no search space for {kind!r}; choose from {', '.join(SEARCH_SPACES)}")
        budget = args.budget if args.budget is not None else TRIAL_BUDGETS[kind]
        res = random_search(kind, budget, data, root.spawn("search", 0).spawn(kind), jobs=args.jobs)
        doc["tuned"][kind] = res.best_config
        doc["searches"][kind] = res.to_dict()
        print(f"{kind}: best validation loss {res.best_score:.6f} with {res.best_config}")
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    data = _prepared(args)
    reg = default_registry(_load_tuned(args.tuned), n_members=args.members, n_samples=args.samples,
                           include=(args.model,))
    spec = reg[0]
    model, val = fit_model(spec, data, RngStream(args.seed).spawn(f"model/{spec.name}"))
    provenance = {"master_seed": args.seed, "stream": f"model/{spec.name}", "model": spec.name}
    hyper = {k: v for k, v in spec.params.items() if k != "fit"}
    save_model(args.out, model, data.scaler, hyper, provenance)
    print(f"trained {spec.name} (validation loss {val:.6f}) -> {args.out}")
    return 0


def _emit(report: ExperimentReport, out) -> int:
    Path(out).mkdir(parents=True, exist_ok=True)
    paths = write_report(report, out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def cmd_eval(args) -> int:
    data = _prepared(args)
    reg = _registry(args, classifiers_only=True)
    rep = evaluate_mortality(reg, data, args.runs, RngStream(args.seed), args.jobs,
                             _snapshot(args, "runs", "models", "members", "samples"))
    return _emit(rep, args.out)


def cmd_perturb(args) -> int:
    data = _prepared(args)
    rep = perturbation_experiment(_registry(args), data, args.factors, args.repeats, RngStream(args.seed),
                                  args.runs, args.jobs, _snapshot(args, "runs", "models", "members", "samples"))
    return _emit(rep, args.out)


def cmd_holdout(args) -> int:
    ds = TabularDataset.from_files(args.features, args.labels)
    rep = group_holdout_experiment(ds, _registry(args), args.groups, args.runs, RngStream(args.seed), args.jobs,
                                   config=_snapshot(args, "runs", "models", "members", "samples"))
    return _emit(rep, args.out)


def cmd_crossdata(args) -> int:
    a = TabularDataset.from_files(args.features_a, args.labels_a)
    b = TabularDataset.from_files(args.features_b, args.labels_b)
    if len(args.names) != 2:
        raise UsageError("--names needs exactly two names")
    rep = cross_dataset_experiment(a, b, _registry(args), args.runs, RngStream(args.seed), args.jobs,
                                   names=tuple(args.names),
                                   config=_snapshot(args, "runs", "models", "members", "samples"))
    return _emit(rep, args.out)


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows += ExperimentReport.from_json(Path(path).read_text(encoding="utf-8")).csv_rows()
    Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "tune": cmd_tune,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "holdout": cmd_holdout,
    "crossdata": cmd_crossdata,
    "report": cmd_report,
}


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="uqtab: %(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"uqtab: error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        msg = str(exc).replace("\n", " ")
        print(f"uqtab: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
