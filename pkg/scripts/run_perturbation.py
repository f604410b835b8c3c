"""Scale single test-set features by 10..10^4 and check which scores flag the corrupted rows."""

from common import base_parser, cohort, prepare, print_table, registry, save

from uqtab.experiments import DEFAULT_FACTORS, perturbation_experiment
from uqtab.numerics import RngStream


def main():
    p = base_parser(__doc__, n_patients=5000)
    p.add_argument("--repeats", type=int, default=100, help="perturbed columns per factor")
    args = p.parse_args()
    data = prepare(cohort(args.n_patients, args.seed), args.seed)
    rep = perturbation_experiment(registry(args, data), data, DEFAULT_FACTORS, args.repeats,
                                  RngStream(args.seed), args.runs, args.jobs)
    print_table(rep)
    save(rep, args.out)


if __name__ == "__main__":
    main()
