"""Run the synthetic reliability grid and print a per-cell comparison.

Sweeps annotator noise levels, runs the adaptive loop against the fixed
round-count baselines on paired records, writes the grid CSV, and prints
the mean call counts and masked-task errors side by side.

Usage:
    python3 scripts/run_reliability_grid.py --out grid.csv
    python3 scripts/run_reliability_grid.py --out grid.csv --records 1000 \
        --noise 0.0 0.1 0.2 0.3
"""

import argparse

from seke.simlab import SimConfig, run_grid, write_grid_csv


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output CSV path")
    parser.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3])
    parser.add_argument("--va-sigma", type=float, nargs="+", default=[0.2])
    parser.add_argument("--records", type=int, default=200,
                        help="paired records per grid cell (at least 100)")
    parser.add_argument("--max-samples", type=int, default=5)
    parser.add_argument("--baselines", type=int, nargs="+", default=[2, 5])
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--summarizer", choices=("vote", "oracle"), default="vote")
    args = parser.parse_args()

    try:
        cfg = SimConfig(
            noise_grid=tuple(args.noise),
            va_sigma_grid=tuple(args.va_sigma),
            records_per_cell=args.records,
            max_samples=args.max_samples,
            baselines=tuple(args.baselines),
            seed=args.seed,
            summarizer=args.summarizer,
        )
    except ValueError as exc:
        parser.error(str(exc))

    results = run_grid(cfg)
    write_grid_csv(results, args.out)

    header = (
        f"{'theta':>6} {'sigma':>6} {'strategy':>9} {'mean_S':>7} "
        f"{'calls':>7} {'expr':>7} {'au':>7} {'va':>7}"
    )
    print(header)
    for row in results:
        print(
            f"{row.theta:>6g} {row.va_sigma:>6g} {row.strategy:>9} "
            f"{row.mean_final_s:>7.3f} {row.mean_calls:>7.3f} "
            f"{row.expr_err:>7.4f} {row.au_hamming:>7.4f} {row.va_abs_err:>7.4f}"
        )
    print(f"wrote {len(results)} rows to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
