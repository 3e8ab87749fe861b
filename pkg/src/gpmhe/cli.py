"""Command line front end for the estimation benchmarks.

Subcommands:
  gen-data    simulate the offline rollouts and write them as CSV
  train       fit the GP dynamics on freshly generated offline data
  estimate    run one estimator online from the demonstration initial state
  benchmark   Monte Carlo comparison of the configured estimator roster
  analyze     contraction constants, model-error level and bound check

Every subcommand accepts --config pointing to a JSON document with keys
mirroring the experiment settings, all optional:

  {
    "system": "reactor1" | "reactor2",
    "offline_initial_states": [[...], ...],
    "sample_lower": [...], "sample_upper": [...],
    "x0_hat": [...], "x0_single": [...],
    "estimators": ["mhe-propagated", ...],
    "offline_steps": 31, "online_steps": 150, "runs": 20,
    "horizon": 15, "forgetting": 0.91, "prior_weight": 0.1,
    "sigma_x_max": 1e5, "sigma_y_max": 1e5, "epsilon": 0.0,
    "train_starts": 8, "grid_points": 11, "refinements": 2000,
    "seed": 0, "workers": null
  }

--seed and --runs override the config; outputs land under --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmark, dynamics, stability


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as handle:
        return json.load(handle)


def _build_spec(args, **overrides) -> benchmark.ExperimentSpec:
    doc = _load_config(args.config)
    overrides.setdefault("seed", args.seed)
    return benchmark.spec_from_config(doc, **overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2))


def cmd_gen_data(args) -> int:
    spec = _build_spec(args)
    out = _out_dir(args)
    trajectories = benchmark.generate_offline_trajectories(spec)
    path = out / "offline_data.csv"
    dynamics.save_trajectories_csv(trajectories, path)
    _emit({"system": spec.truth.name, "seed": spec.seed,
           "trajectories": len(trajectories),
           "steps_each": spec.offline_steps, "path": str(path)})
    return 0


def cmd_train(args) -> int:
    spec = _build_spec(args)
    out = _out_dir(args)
    learned = benchmark.train_models(spec)
    path = out / "model.json"
    dynamics.save_dynamics(learned, path)
    _emit({"system": spec.truth.name, "seed": spec.seed,
           "state_gps": spec.truth.n, "output_gps": spec.truth.p,
           "training_rows": learned.state_gps[0].inputs.shape[0],
           "path": str(path)})
    return 0


def cmd_estimate(args) -> int:
    spec = _build_spec(args)
    out = _out_dir(args)
    name = args.estimator or spec.estimators[0]
    learned = benchmark.train_models(spec)
    record = benchmark.run_online(spec, learned, estimator_name=name)
    path = out / f"trajectory_{name}.csv"
    n = spec.truth.n
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t"] + [f"x_{i}" for i in range(n)]
                        + [f"xhat_{i}" for i in range(n)] + ["step_time"])
        for t in range(record.states.shape[0]):
            tau = 0.0 if t == 0 else float(record.step_times[t - 1])
            writer.writerow([t, *record.states[t], *record.estimates[t], tau])
    _emit({"system": spec.truth.name, "estimator": name, "seed": spec.seed,
           "steps": spec.online_steps, "mse": benchmark.mse(record),
           "clamped": record.clamped, "path": str(path)})
    return 0


def cmd_benchmark(args) -> int:
    roster = (args.estimator,) if args.estimator else None
    spec = _build_spec(args, runs=args.runs, estimators=roster)
    out = _out_dir(args)
    table = benchmark.monte_carlo(spec, out_dir=out)
    for s in table.stats:
        print(f"{s.estimator}: mean_mse={s.mean_mse:.6g} "
              f"std_mse={s.std_mse:.6g} mean_step_time={s.mean_step_time:.4g}s")
    print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_analyze(args) -> int:
    spec = _build_spec(args)
    out = _out_dir(args)
    truth = spec.truth
    config = benchmark.mhe_config(spec)
    stab = stability.StabilityConfig(
        noise=truth.noise, caps=config.caps, forgetting=spec.forgetting,
        state_lower=truth.state_lower, state_upper=truth.state_upper,
        grid_points=spec.grid_points, refinements=spec.refinements,
        seed=spec.seed)
    lam, m_bar = stability.contraction_and_min_horizon(stab)
    mu = stability.contraction_rate(stab, spec.horizon)
    learned = benchmark.train_models(spec)
    alpha_state, alpha_output, alpha_max = stability.estimate_alpha_max(
        learned, truth.f, truth.h, stab)
    rng = np.random.default_rng(spec.seed)
    truth_run = benchmark.simulate_truth(truth, spec.x0_single,
                                         spec.online_steps, rng)
    estimator = benchmark.build_estimator("mhe-propagated", spec, learned)
    estimates, _ = benchmark.drive_estimator(estimator, truth_run)
    run = benchmark.to_estimation_run(truth_run, estimates,
                                      config.prior_cov_init)
    report = stability.check_pres_bound(run, learned, mu, alpha_max, stab,
                                        spec.horizon)
    path = out / "pres_report.csv"
    report.to_csv(path)
    _emit({"system": truth.name, "seed": spec.seed,
           "contraction_lambda": lam, "min_horizon": m_bar,
           "horizon": spec.horizon, "mu": mu,
           "alpha_state": alpha_state, "alpha_output": alpha_output,
           "alpha_max": alpha_max, "applicable": bool(report.applicable),
           "violations": int(report.violations), "path": str(path)})
    return 0


def _add_common(parser) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON file with experiment settings")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default="gpmhe_out",
                        help="output directory (default: gpmhe_out)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gpmhe", description="GP dynamics learning and moving horizon "
                                  "estimation benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write offline rollouts as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit GP dynamics on offline data")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="single online estimation run")
    _add_common(p)
    p.add_argument("--estimator", choices=benchmark.ESTIMATOR_NAMES,
                   default=None, help="estimator to run (default: first "
                                      "roster entry)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("benchmark", help="Monte Carlo estimator comparison")
    _add_common(p)
    p.add_argument("--estimator", choices=benchmark.ESTIMATOR_NAMES,
                   default=None, help="restrict the roster to one estimator")
    p.add_argument("--runs", type=int, default=None,
                   help="override the number of Monte Carlo runs")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("analyze", help="contraction constants and bound check")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
