#!/usr/bin/env python3
"""Sensitivity of the window estimator to the prior weight and the caps.

Sweeps the prior information weight (cost weight on the arrival term) and
the state uncertainty cap for the propagated-weight estimator on reactor 1,
reusing one trained model and the same run seeds for every cell.
"""

import argparse
import dataclasses

from gpmhe import benchmark


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--prior-weights", type=float, nargs="+",
                        default=[1e-2, 1e-1, 1.0])
    parser.add_argument("--sigma-x-max", type=float, nargs="+",
                        default=[1e3, 1e5, 1e7])
    args = parser.parse_args()

    base = benchmark.reactor1_spec(runs=args.runs, seed=args.seed,
                                   estimators=("mhe-propagated",))
    learned = benchmark.train_models(base)

    print("prior weight sweep (sigma_x_max fixed at default)")
    for weight in args.prior_weights:
        spec = dataclasses.replace(base, prior_weight=weight)
        table = benchmark.monte_carlo(spec, learned=learned)
        s = table.stats_for("mhe-propagated")
        print(f"  P = {weight:g} I: mse {s.mean_mse:.4f} +- {s.std_mse:.4f}")

    print("state cap sweep (prior weight fixed at default)")
    for cap in args.sigma_x_max:
        spec = dataclasses.replace(base, sigma_x_max=cap)
        table = benchmark.monte_carlo(spec, learned=learned)
        s = table.stats_for("mhe-propagated")
        print(f"  sigma_x_max = {cap:g} I: mse {s.mean_mse:.4f} "
              f"+- {s.std_mse:.4f}")


if __name__ == "__main__":
    main()
