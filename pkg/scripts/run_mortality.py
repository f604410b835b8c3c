"""Mortality AUC-ROC of every classifier on a synthetic cohort, mean ± std over runs."""

from common import base_parser, cohort, prepare, print_table, registry, save

from uqtab.experiments import evaluate_mortality
from uqtab.numerics import RngStream


def main():
    p = base_parser(__doc__, runs=5, tune_budget=5)
    p.add_argument("--label-strength", type=float, default=3.0)
    args = p.parse_args()
    ds = cohort(args.n_patients, args.seed, label_strength=args.label_strength)
    data = prepare(ds, args.seed)
    reg = [s for s in registry(args, data) if s.is_classifier]
    rep = evaluate_mortality(reg, data, args.runs, RngStream(args.seed), args.jobs)
    print_table(rep, mortality=True)
    save(rep, args.out)


if __name__ == "__main__":
    main()
