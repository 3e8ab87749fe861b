"""Batch-reactor benchmarks: truth systems, data generation, Monte Carlo runs.

Two Euler-discretized batch reactors serve as ground truth. The offline
phase simulates a few noisy rollouts (recording true states, since state
measurements are assumed noise-free offline) and fits one GP per state and
output dimension. The online phase samples initial conditions, replays a
shared noisy rollout through every estimator in the roster and aggregates
per-run error and timing statistics.
"""

from __future__ import annotations

import csv
import json
import os
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics, stability
from .filters import EkfPriorMhe, GpEkf, GpUkf
from .mhe import MheConfig, MovingHorizonEstimator, _check_box
from .propagation import NoiseConfig, UncertaintyCaps

_STATE_GUARD = 1e6

ESTIMATOR_NAMES = (
    "mhe-propagated",
    "mhe-onestep",
    "mhe-constant",
    "model-mhe",
    "model-mhe-ekf-prior",
    "ekf",
    "ukf",
)


def reactor1_step(x, w=(0.0, 0.0)) -> tuple[np.ndarray, float]:
    """One Euler step of the 2-species reactor; returns (next state, clean y).

    The output is the total concentration x1 + x2; measurement noise is
    added by the caller.
    """
    x = np.asarray(x, dtype=float).reshape(2)
    w = np.asarray(w, dtype=float).reshape(2)
    t_s, k1, k2 = 0.1, 0.16, 0.0064
    rate = k1 * x[0] ** 2 - k2 * x[1]
    x_next = np.array([x[0] - 2.0 * t_s * rate + w[0],
                       x[1] + t_s * rate + w[1]])
    return x_next, float(x[0] + x[1])


def reactor2_step(x, w=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, float]:
    """One Euler step of the 3-species reversible reactor.

    The measured output is the amplified total concentration
    32.84 * (x1 + x2 + x3).
    """
    x = np.asarray(x, dtype=float).reshape(3)
    w = np.asarray(w, dtype=float).reshape(3)
    t_s, k1, km1, k2, km2 = 0.25, 0.5, 0.05, 0.2, 0.02
    r1 = k1 * x[0] - km1 * x[1] * x[2]
    x_next = np.array([
        x[0] - t_s * r1 + w[0],
        x[1] + t_s * (r1 - 2.0 * k2 * x[1] ** 2 + km2 * x[2]) + w[1],
        x[2] + t_s * (r1 + k2 * x[1] ** 2 - km2 * x[2]) + w[2],
    ])
    return x_next, float(32.84 * (x[0] + x[1] + x[2]))


def _reactor1_f(x, u=()):
    return reactor1_step(x)[0]


def _reactor1_h(x, u=()):
    return np.array([reactor1_step(x)[1]])


def _reactor1_f_jac(x, u=()):
    x = np.asarray(x, dtype=float).reshape(2)
    t_s, k1, k2 = 0.1, 0.16, 0.0064
    d_rate = np.array([2.0 * k1 * x[0], -k2])
    return np.eye(2) + np.outer([-2.0 * t_s, t_s], d_rate)


def _reactor1_h_jac(x, u=()):
    return np.array([[1.0, 1.0]])


def _reactor2_f(x, u=()):
    return reactor2_step(x)[0]


def _reactor2_h(x, u=()):
    return np.array([reactor2_step(x)[1]])


def _reactor2_f_jac(x, u=()):
    x = np.asarray(x, dtype=float).reshape(3)
    t_s, k1, km1, k2, km2 = 0.25, 0.5, 0.05, 0.2, 0.02
    d_r1 = np.array([k1, -km1 * x[2], -km1 * x[1]])
    d_sq = np.array([0.0, 2.0 * k2 * x[1], 0.0])
    d_x3 = np.array([0.0, 0.0, km2])
    return np.eye(3) + t_s * np.vstack(
        [-d_r1, d_r1 - 2.0 * d_sq + d_x3, d_r1 + d_sq - d_x3])


def _reactor2_h_jac(x, u=()):
    return 32.84 * np.ones((1, 3))


@dataclass
class TruthModel:
    """Exact benchmark system with its default operating box and noise."""

    name: str
    n: int
    m: int
    p: int
    f: Callable
    h: Callable
    f_jac: Callable
    h_jac: Callable
    state_lower: np.ndarray
    state_upper: np.ndarray
    noise: NoiseConfig

    def to_dynamics(self) -> dynamics.TrueDynamics:
        """Wrap the exact maps in the learned-dynamics interface."""
        return dynamics.TrueDynamics(f=self.f, h=self.h, n=self.n, m=self.m,
                                     p=self.p, f_jac=self.f_jac,
                                     h_jac=self.h_jac)


def reactor1() -> TruthModel:
    """2-species batch reactor measuring total concentration."""
    return TruthModel(
        name="reactor1", n=2, m=0, p=1,
        f=_reactor1_f, h=_reactor1_h,
        f_jac=_reactor1_f_jac, h_jac=_reactor1_h_jac,
        state_lower=np.array([0.1, 0.1]), state_upper=np.array([4.5, 4.5]),
        noise=NoiseConfig.from_variances([1e-5, 1e-5], [1e-3]))


def reactor2() -> TruthModel:
    """3-species reversible batch reactor with amplified output."""
    return TruthModel(
        name="reactor2", n=3, m=0, p=1,
        f=_reactor2_f, h=_reactor2_h,
        f_jac=_reactor2_f_jac, h_jac=_reactor2_h_jac,
        state_lower=np.zeros(3), state_upper=np.full(3, 5.0),
        noise=NoiseConfig.from_variances([1e-5, 1e-5, 1e-5], [1e-3]))


@dataclass
class ExperimentSpec:
    """Everything one benchmark needs: truth system, protocols and roster.

    `x0_hat` is the (wrong) prior estimate shared by every estimator;
    `x0_single` is the true initial state for single demonstration runs,
    while Monte Carlo runs sample x(0) uniformly from the sample box.
    """

    truth: TruthModel
    offline_initial_states: np.ndarray
    sample_lower: np.ndarray
    sample_upper: np.ndarray
    x0_hat: np.ndarray
    x0_single: np.ndarray
    estimators: tuple = ESTIMATOR_NAMES
    offline_steps: int = 31
    online_steps: int = 150
    runs: int = 20
    horizon: int = 15
    forgetting: float = 0.91
    prior_weight: float = 0.1
    sigma_x_max: float = 1e5
    sigma_y_max: float = 1e5
    epsilon: float = 0.0
    train_starts: int = 8
    grid_points: int = 11
    refinements: int = 2000
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        n = self.truth.n
        self.offline_initial_states = np.atleast_2d(
            np.asarray(self.offline_initial_states, dtype=float))
        if self.offline_initial_states.shape[1] != n:
            raise ValueError("offline initial states must match the state dim")
        self.sample_lower, self.sample_upper = _check_box(
            self.sample_lower, self.sample_upper, "sample")
        if self.sample_lower.size != n:
            raise ValueError("sample box must match the state dimension")
        self.x0_hat = np.asarray(self.x0_hat, dtype=float).reshape(n)
        self.x0_single = np.asarray(self.x0_single, dtype=float).reshape(n)
        self.estimators = tuple(self.estimators)
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown:
            raise ValueError(f"unknown estimators: {unknown}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.online_steps < 1:
            raise ValueError("online_steps must be at least 1")
        if self.offline_steps < 2:
            raise ValueError("offline_steps must be at least 2")
        if self.prior_weight <= 0:
            raise ValueError("prior_weight must be positive")
        if self.sigma_x_max <= 0 or self.sigma_y_max <= 0:
            raise ValueError("uncertainty caps must be positive")


def reactor1_spec(**kw) -> ExperimentSpec:
    """Default benchmark setting for the 2-species reactor."""
    base = dict(
        truth=reactor1(),
        offline_initial_states=np.array([[3.0, 1.0], [1.0, 3.0], [2.0, 4.0]]),
        sample_lower=np.array([1.0, 1.0]), sample_upper=np.array([3.0, 3.0]),
        x0_hat=np.array([0.1, 4.5]), x0_single=np.array([2.0, 2.0]),
    )
    base.update(kw)
    return ExperimentSpec(**base)


def reactor2_spec(**kw) -> ExperimentSpec:
    """Default benchmark setting for the 3-species reactor."""
    base = dict(
        truth=reactor2(),
        offline_initial_states=np.array(
            [[0.5, 0.5, 0.5], [1.5, 1.5, 1.5], [1.0, 0.2, 0.2]]),
        sample_lower=np.full(3, 0.5), sample_upper=np.full(3, 1.5),
        x0_hat=np.ones(3), x0_single=np.array([1.0, 0.5, 0.5]),
        estimators=("mhe-propagated", "ekf", "ukf"),
        runs=10,
    )
    base.update(kw)
    return ExperimentSpec(**base)


def spec_from_config(doc: dict | None = None, **overrides) -> ExperimentSpec:
    """Build a spec from the JSON config schema (keys mirror ExperimentSpec).

    `doc["system"]` picks the reactor ("reactor1" default); the remaining
    keys override the corresponding spec fields. Keyword overrides win over
    the document; None overrides are ignored.
    """
    doc = dict(doc or {})
    doc.update({k: v for k, v in overrides.items() if v is not None})
    system = doc.pop("system", "reactor1")
    factories = {"reactor1": reactor1_spec, "reactor2": reactor2_spec}
    if system not in factories:
        raise ValueError(f"unknown system '{system}'")
    array_keys = ("offline_initial_states", "sample_lower", "sample_upper",
                  "x0_hat", "x0_single")
    kw = {key: np.asarray(value, dtype=float) if key in array_keys else value
          for key, value in doc.items()}
    if "estimators" in kw:
        kw["estimators"] = tuple(kw["estimators"])
    return factories[system](**kw)


def mhe_config(spec: ExperimentSpec, cost_mode: str = "propagated") -> MheConfig:
    """Estimator settings implied by a benchmark spec."""
    truth = spec.truth
    caps = UncertaintyCaps.from_noise(
        truth.noise, spec.sigma_x_max * np.eye(truth.n),
        spec.sigma_y_max * np.eye(truth.p), epsilon=spec.epsilon)
    return MheConfig(
        state_lower=truth.state_lower, state_upper=truth.state_upper,
        noise=truth.noise, caps=caps, horizon=spec.horizon,
        forgetting=spec.forgetting, cost_mode=cost_mode,
        prior_cov_init=np.eye(truth.n) / spec.prior_weight)


def build_estimator(name: str, spec: ExperimentSpec, learned):
    """Fresh estimator instance for one run."""
    if name == "mhe-propagated":
        return MovingHorizonEstimator(learned, mhe_config(spec, "propagated"),
                                      spec.x0_hat)
    if name == "mhe-onestep":
        return MovingHorizonEstimator(learned, mhe_config(spec, "one_step"),
                                      spec.x0_hat)
    if name == "mhe-constant":
        return MovingHorizonEstimator(learned, mhe_config(spec, "constant"),
                                      spec.x0_hat)
    if name == "model-mhe":
        return MovingHorizonEstimator(spec.truth.to_dynamics(),
                                      mhe_config(spec, "constant"), spec.x0_hat)
    if name == "model-mhe-ekf-prior":
        return EkfPriorMhe(spec.truth.to_dynamics(),
                           mhe_config(spec, "constant"), spec.x0_hat)
    prior_cov = np.eye(spec.truth.n) / spec.prior_weight
    if name == "ekf":
        return GpEkf(learned, spec.truth.noise, spec.x0_hat, prior_cov)
    if name == "ukf":
        return GpUkf(learned, spec.truth.noise, spec.x0_hat, prior_cov)
    raise ValueError(f"unknown estimator '{name}'")


def _offline_rng(spec: ExperimentSpec) -> np.random.Generator:
    """Offline-phase stream: first child of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])


def generate_offline_trajectories(spec: ExperimentSpec,
                                  rng=None) -> list[dynamics.Trajectory]:
    """Noisy rollouts from the offline initial conditions.

    True states are recorded (offline state measurements are noise-free);
    process noise still drives the transitions and output noise corrupts y.
    """
    rng = _offline_rng(spec) if rng is None else rng
    truth = spec.truth
    w_std = np.sqrt(np.diag(truth.noise.sigma_w))
    v_std = np.sqrt(np.diag(truth.noise.sigma_v))
    out = []
    for x0 in spec.offline_initial_states:
        x = np.asarray(x0, dtype=float).copy()
        states, outputs = [], []
        for _ in range(spec.offline_steps):
            states.append(x.copy())
            outputs.append(truth.h(x, ()) + rng.normal(0.0, v_std))
            x = truth.f(x, ()) + rng.normal(0.0, w_std)
        out.append(dynamics.Trajectory(
            np.array(states), np.zeros((spec.offline_steps, 0)),
            np.array(outputs)))
    return out


def generate_offline_data(spec: ExperimentSpec,
                          rng=None) -> dynamics.RegressionDataset:
    """Stacked regression rows from the offline protocol."""
    return dynamics.build_dataset(generate_offline_trajectories(spec, rng))


def lengthscale_bounds(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension lengthscale box from the median-distance heuristic.

    Reactor transitions are smooth enough that unconstrained likelihood
    maximization drifts to lengthscales orders of magnitude beyond the data
    span, which flattens the posterior variance and defeats uncertainty-based
    weighting. Capping at the median pairwise distance per input dimension
    keeps the variance tied to training coverage.
    """
    inputs = np.asarray(inputs, dtype=float)
    gaps = np.abs(inputs[:, None, :] - inputs[None, :, :])
    tri = np.triu_indices(inputs.shape[0], k=1)
    median = np.median(gaps[tri], axis=0)
    median = np.where(median > 1e-8, median, 1.0)
    return median / 100.0, median


def train_models(spec: ExperimentSpec, rng=None) -> dynamics.LearnedDynamics:
    """Offline phase end to end: generate data, tune and fit the GPs."""
    dataset = generate_offline_data(spec, rng)
    return dynamics.fit_dynamics(dataset, starts=spec.train_starts,
                                 seed=spec.seed,
                                 lengthscale_bounds=lengthscale_bounds(dataset.inputs))


@dataclass
class TruthRun:
    """One noisy rollout, shared by every estimator of a Monte Carlo run."""

    states: np.ndarray             # (T+1, n) true states
    inputs: np.ndarray             # (T, m)
    outputs: np.ndarray            # (T+1, p) measured output at every time
    process_noise: np.ndarray      # (T, n)
    measurement_noise: np.ndarray  # (T+1, p)
    clamped: int = 0


def simulate_truth(truth: TruthModel, x0, steps: int, rng) -> TruthRun:
    """Roll the exact system forward with fresh noise; clamp-and-flag blowups."""
    w_std = np.sqrt(np.diag(truth.noise.sigma_w))
    v_std = np.sqrt(np.diag(truth.noise.sigma_v))
    w = rng.normal(0.0, w_std, size=(steps, truth.n))
    v = rng.normal(0.0, v_std, size=(steps + 1, truth.p))
    x = np.asarray(x0, dtype=float).reshape(truth.n).copy()
    states = [x.copy()]
    outputs = [truth.h(x, ()) + v[0]]
    clamped = 0
    for t in range(steps):
        x = truth.f(x, ()) + w[t]
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > _STATE_GUARD):
            x = np.nan_to_num(x, nan=0.0, posinf=_STATE_GUARD,
                              neginf=-_STATE_GUARD)
            x = np.clip(x, -_STATE_GUARD, _STATE_GUARD)
            clamped += 1
        states.append(x.copy())
        outputs.append(truth.h(x, ()) + v[t + 1])
    return TruthRun(np.array(states), np.zeros((steps, truth.m)),
                    np.array(outputs), w, v, clamped)


def drive_estimator(estimator, run: TruthRun) -> tuple[np.ndarray, np.ndarray]:
    """Feed one recorded rollout to an estimator, timing every step.

    Filters consume the measurement of the state they estimate; the window
    estimator consumes outputs up to the previous time, as signalled by the
    `uses_current_measurement` attribute.
    """
    uses_current = bool(getattr(estimator, "uses_current_measurement", False))
    steps = run.process_noise.shape[0]
    estimates = [np.asarray(estimator.estimate, dtype=float).copy()]
    times = np.empty(steps)
    for t in range(steps):
        y = run.outputs[t + 1] if uses_current else run.outputs[t]
        start = time.perf_counter()
        estimator.step(run.inputs[t], y)
        times[t] = time.perf_counter() - start
        estimates.append(np.asarray(estimator.estimate, dtype=float).copy())
    return np.array(estimates), times


@dataclass
class RunRecord:
    """Per-run estimator outcome: trajectories, timing, clamp flag."""

    estimator: str
    run_index: int
    x0: np.ndarray
    states: np.ndarray
    estimates: np.ndarray
    step_times: np.ndarray
    clamped: int = 0


def mse(record: RunRecord) -> float:
    """Squared estimation error averaged over dimensions and steps 1..T."""
    err = record.states[1:] - record.estimates[1:]
    return float(np.mean(err ** 2))


def run_roster(spec: ExperimentSpec, learned, run_index: int,
               rng) -> list[RunRecord]:
    """One Monte Carlo run: shared rollout, every estimator in the roster."""
    x0 = rng.uniform(spec.sample_lower, spec.sample_upper)
    truth_run = simulate_truth(spec.truth, x0, spec.online_steps, rng)
    records = []
    for name in spec.estimators:
        estimator = build_estimator(name, spec, learned)
        estimates, times = drive_estimator(estimator, truth_run)
        records.append(RunRecord(name, run_index, x0, truth_run.states,
                                 estimates, times, truth_run.clamped))
    return records


def run_online(spec: ExperimentSpec, learned, estimator_name=None,
               rng=None, x0=None) -> RunRecord:
    """Single online run of one estimator from the demonstration initial state."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    name = estimator_name or spec.estimators[0]
    x0 = spec.x0_single if x0 is None else np.asarray(x0, dtype=float)
    truth_run = simulate_truth(spec.truth, x0, spec.online_steps, rng)
    estimator = build_estimator(name, spec, learned)
    estimates, times = drive_estimator(estimator, truth_run)
    return RunRecord(name, 0, x0.copy(), truth_run.states, estimates, times,
                     truth_run.clamped)


@dataclass
class EstimatorStats:
    """Aggregated error and timing for one estimator over all runs."""

    estimator: str
    runs: int
    mean_mse: float
    std_mse: float
    mean_step_time: float
    std_step_time: float


@dataclass
class ResultTable:
    """Per-estimator statistics plus the raw per-run records."""

    stats: list
    records: list

    def stats_for(self, name: str) -> EstimatorStats:
        for entry in self.stats:
            if entry.estimator == name:
                return entry
        raise KeyError(name)


def aggregate(spec: ExperimentSpec, records: list) -> ResultTable:
    """Mean/std MSE and mean/std per-step time for every roster estimator."""
    stats = []
    for name in spec.estimators:
        rows = [r for r in records if r.estimator == name]
        if not rows:
            raise ValueError(f"no records for estimator '{name}'")
        errors = np.array([mse(r) for r in rows])
        if not np.all(np.isfinite(errors)):
            raise ValueError(f"non-finite MSE for estimator '{name}'")
        taus = np.array([float(np.mean(r.step_times)) for r in rows])
        stats.append(EstimatorStats(
            name, len(rows), float(np.mean(errors)), float(np.std(errors)),
            float(np.mean(taus)), float(np.std(taus))))
    return ResultTable(stats, list(records))


def monte_carlo(spec: ExperimentSpec, learned=None,
                out_dir=None) -> ResultTable:
    """Run the roster over seeded Monte Carlo repetitions.

    Initial conditions and noise come from per-run child seeds spawned off
    spec.seed, so results do not depend on worker scheduling; within one run
    every estimator sees the same rollout. Writes results/runs CSVs plus a
    JSON summary when out_dir is given.
    """
    if learned is None:
        learned = train_models(spec)
    online_seq = np.random.SeedSequence(spec.seed).spawn(2)[1]
    run_rngs = [np.random.default_rng(s) for s in online_seq.spawn(spec.runs)]
    workers = spec.workers or min(spec.runs, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_roster, spec, learned, r, run_rngs[r])
                   for r in range(spec.runs)]
        records = [rec for fut in futures for rec in fut.result()]
    table = aggregate(spec, records)
    if out_dir is not None:
        write_results(table, spec, out_dir)
    return table


def write_results(table: ResultTable, spec: ExperimentSpec, out_dir) -> dict:
    """Emit results.csv, runs.csv and results.json under out_dir.

    Timing lives in the trailing *_step_time columns only, so the remaining
    columns are bit-identical across repeated runs with the same seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    with open(results_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["estimator", "runs", "mean_mse", "std_mse",
                         "mean_step_time", "std_step_time"])
        for s in table.stats:
            writer.writerow([s.estimator, s.runs, s.mean_mse, s.std_mse,
                             s.mean_step_time, s.std_step_time])
    runs_path = out / "runs.csv"
    with open(runs_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["run", "estimator"]
                        + [f"x0_{i}" for i in range(spec.truth.n)]
                        + ["mse", "clamped", "mean_step_time"])
        for r in table.records:
            writer.writerow([r.run_index, r.estimator, *r.x0, mse(r),
                             r.clamped, float(np.mean(r.step_times))])
    summary = {
        "system": spec.truth.name,
        "seed": spec.seed,
        "runs": spec.runs,
        "online_steps": spec.online_steps,
        "horizon": spec.horizon,
        "forgetting": spec.forgetting,
        "estimators": list(spec.estimators),
        "stats": [vars(s).copy() for s in table.stats],
    }
    json_path = out / "results.json"
    json_path.write_text(json.dumps(summary, indent=2) + "\n")
    return {"results": results_path, "runs": runs_path, "json": json_path}


def to_estimation_run(truth_run: TruthRun, estimates,
                      prior_cov) -> stability.EstimationRun:
    """Repackage a rollout and an estimate track for the bound checker."""
    steps = truth_run.process_noise.shape[0]
    return stability.EstimationRun(
        states=truth_run.states, inputs=truth_run.inputs,
        process_noise=truth_run.process_noise,
        measurement_noise=truth_run.measurement_noise[:steps],
        estimates=np.asarray(estimates, dtype=float), prior_cov=prior_cov)
