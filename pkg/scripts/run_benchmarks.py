#!/usr/bin/env python3
"""Monte Carlo estimator comparison on both reactors.

Runs the full roster on reactor 1 and the reduced roster on reactor 2,
writes results/runs CSVs per system and prints the summary tables.
"""

import argparse
import time

from gpmhe import benchmark


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", type=int, default=None,
                        help="override Monte Carlo repetitions per system")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    for factory in (benchmark.reactor1_spec, benchmark.reactor2_spec):
        overrides = {"seed": args.seed}
        if args.runs is not None:
            overrides["runs"] = args.runs
        spec = factory(**overrides)
        out_dir = f"{args.out}/{spec.truth.name}"
        print(f"== {spec.truth.name}: {spec.runs} runs x "
              f"{spec.online_steps} steps, roster {spec.estimators}")
        start = time.perf_counter()
        table = benchmark.monte_carlo(spec, out_dir=out_dir)
        print(f"   done in {time.perf_counter() - start:.0f}s "
              f"-> {out_dir}/results.csv")
        for s in table.stats:
            print(f"   {s.estimator:22s} mse {s.mean_mse:.4f} "
                  f"+- {s.std_mse:.4f}   step {s.mean_step_time * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
