#!/usr/bin/env python3
"""End-to-end estimation-error bound demo on a scalar contractive system.

The reactor defaults keep the weight caps so loose that the contraction
certificate needs a 259-step window. This demo instead uses a scalar
system (x+ = 0.35 x + w, y = x + v) with tight caps, where the minimal
window is 4, fits GP dynamics from simulated rollouts, runs the window
estimator for several seeds and counts violations of the error bound.
"""

import argparse
from pathlib import Path

import numpy as np

from gpmhe import dynamics, stability
from gpmhe.mhe import MheConfig, MovingHorizonEstimator
from gpmhe.propagation import NoiseConfig, UncertaintyCaps

DECAY = 0.35
SIGMA_W = 1e-4
SIGMA_V = 1e-3


def f_true(x, u=()):
    return DECAY * np.asarray(x, dtype=float).reshape(1)


def h_true(x, u=()):
    return np.asarray(x, dtype=float).reshape(1)


def simulate(x0: float, steps: int, rng) -> dynamics.Trajectory:
    xs, ys = [], []
    x = np.array([x0])
    for _ in range(steps):
        xs.append(x.copy())
        ys.append(h_true(x) + rng.normal(0.0, np.sqrt(SIGMA_V), 1))
        x = f_true(x) + rng.normal(0.0, np.sqrt(SIGMA_W), 1)
    return dynamics.Trajectory(np.array(xs), np.zeros((steps, 0)),
                               np.array(ys))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--out", default=None,
                        help="directory for per-seed bound reports")
    args = parser.parse_args()
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)

    noise = NoiseConfig.from_variances([SIGMA_W], [SIGMA_V])
    caps = UncertaintyCaps.from_noise(noise, 2.0 * SIGMA_W * np.eye(1),
                                      2.0 * SIGMA_V * np.eye(1),
                                      epsilon=SIGMA_W)
    stab = stability.StabilityConfig(
        noise=noise, caps=caps, forgetting=0.5,
        state_lower=np.array([-2.0]), state_upper=np.array([2.0]),
        grid_points=41, refinements=2000, seed=0)
    lam, m_bar = stability.contraction_and_min_horizon(stab)
    mu = stability.contraction_rate(stab, m_bar)
    print(f"contraction ratio lambda = {lam:.3f}, minimal window = {m_bar}, "
          f"decay rate mu = {mu:.4f}")

    data_rng = np.random.default_rng(0)
    rollouts = [simulate(x0, 40, data_rng) for x0 in (-1.5, 0.0, 1.5)]
    learned = dynamics.fit_dynamics(dynamics.build_dataset(rollouts),
                                    starts=4, seed=0)
    a_state, a_output, a_max = stability.estimate_alpha_max(
        learned, f_true, h_true, stab)
    print(f"weighted model error: state {a_state:.3f}, output {a_output:.3f}"
          f" -> alpha_max {a_max:.3f}")

    config = MheConfig(
        state_lower=stab.state_lower, state_upper=stab.state_upper,
        noise=noise, caps=caps, horizon=m_bar, forgetting=0.5,
        cost_mode="propagated", prior_cov_init=3.0 * SIGMA_W * np.eye(1))

    total = 0
    for seed in range(args.seeds):
        rng = np.random.default_rng(100 + seed)
        x = np.array([0.2])
        estimator = MovingHorizonEstimator(learned, config, np.array([0.8]))
        states, estimates = [x.copy()], [estimator.estimate.copy()]
        w_hist, v_hist = [], []
        for _ in range(args.steps):
            v = rng.normal(0.0, np.sqrt(SIGMA_V), 1)
            estimator.step(np.zeros(0), h_true(x) + v)
            w = rng.normal(0.0, np.sqrt(SIGMA_W), 1)
            x = f_true(x) + w
            states.append(x.copy())
            estimates.append(estimator.estimate.copy())
            w_hist.append(w)
            v_hist.append(v)
        run = stability.EstimationRun(
            states=np.array(states), inputs=np.zeros((args.steps, 0)),
            process_noise=np.array(w_hist),
            measurement_noise=np.array(v_hist),
            estimates=np.array(estimates), prior_cov=config.prior_cov_init)
        report = stability.check_pres_bound(run, learned, mu, a_max, stab,
                                            m_bar)
        total += report.violations
        margin = np.min(report.rhs[1:] / np.maximum(report.lhs[1:], 1e-300))
        print(f"seed {seed}: violations {report.violations}, "
              f"worst rhs/lhs margin {margin:.2f}")
        if args.out is not None:
            report.to_csv(f"{args.out}/pres_seed{seed}.csv")

    print(f"total violations over {args.seeds} seeds: {total}")


if __name__ == "__main__":
    main()
