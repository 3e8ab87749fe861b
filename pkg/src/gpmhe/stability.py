"""Contraction analysis and error-bound certification for the estimator.

The discounted window cost contracts the estimation error once the horizon
is long enough relative to the spread between the smallest and largest
stage weights. This module computes that minimal horizon, the resulting
per-step contraction rate, a sampled bound on the worst-case model error
over the operating box, and a per-step check of the implied error bound
along recorded runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import qmc

from . import propagation
from .dynamics import WindowEval
from .mhe import _check_box, _check_pd
from .propagation import NoiseConfig, UncertaintyCaps


@dataclass
class StabilityConfig:
    """Operating box, discount and uncertainty extremes for the analysis.

    `grid_points` is the per-axis resolution of the deterministic mesh over
    the state (and input) box; `refinements` adds Latin-hypercube samples on
    top of the mesh when bounding the model error.
    """

    noise: NoiseConfig
    caps: UncertaintyCaps
    forgetting: float
    state_lower: np.ndarray
    state_upper: np.ndarray
    input_lower: np.ndarray | None = None
    input_upper: np.ndarray | None = None
    grid_points: int = 11
    refinements: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.forgetting < 1.0:
            raise ValueError("forgetting must lie in [0, 1)")
        self.state_lower, self.state_upper = _check_box(
            self.state_lower, self.state_upper, "state")
        if (self.input_lower is None) != (self.input_upper is None):
            raise ValueError("input bounds must be given together")
        if self.input_lower is not None:
            self.input_lower, self.input_upper = _check_box(
                self.input_lower, self.input_upper, "input")
        if self.grid_points < 2:
            raise ValueError("grid_points must be at least 2")
        if self.refinements < 0:
            raise ValueError("refinements must be nonnegative")


def gen_eig_max(p1: np.ndarray, p2: np.ndarray) -> float:
    """Largest generalized eigenvalue of the pencil (p1, p2), both PD.

    Equals the largest root of det(p1 - lam * p2) and the largest ordinary
    eigenvalue of L^-1 p1 L^-T with p2 = L L^T.
    """
    p1 = _check_pd(np.asarray(p1, dtype=float), "p1")
    p2 = _check_pd(np.asarray(p2, dtype=float), "p2")
    chol = np.linalg.cholesky(p2)
    half = solve_triangular(chol, p1, lower=True)
    whitened = solve_triangular(chol, half.T, lower=True)
    return float(np.linalg.eigvalsh(0.5 * (whitened + whitened.T))[-1])


def contraction_and_min_horizon(config: StabilityConfig) -> tuple[float, int]:
    """Weight-spread eigenvalue and the smallest horizon that contracts.

    Returns (lam, m_bar) where lam compares the inverse minimal state weight
    against the inverse of the capped weight (inflated by epsilon) and m_bar
    is the smallest M with 4 * lam * forgetting**M < 1.
    """
    n = config.caps.sigma_x_min.shape[0]
    inflated = config.caps.sigma_x_max + config.caps.epsilon * np.eye(n)
    lam = gen_eig_max(np.linalg.inv(config.caps.sigma_x_min),
                      np.linalg.inv(inflated))
    eta = config.forgetting
    if eta == 0.0 or 4.0 * lam < 1.0:
        return lam, 1
    m_bar = max(1, math.ceil(math.log(4.0 * lam) / -math.log(eta)))
    while 4.0 * lam * eta ** m_bar >= 1.0:
        m_bar += 1
    while m_bar > 1 and 4.0 * lam * eta ** (m_bar - 1) < 1.0:
        m_bar -= 1
    return lam, m_bar


def contraction_rate(config: StabilityConfig, horizon: int) -> float:
    """Per-step contraction factor mu with mu**horizon = 4 * lam * eta**horizon.

    Values below one certify contraction; at or above one the horizon is too
    short for the error bound to apply.
    """
    if horizon < 1:
        raise ValueError("horizon must be positive")
    lam, _ = contraction_and_min_horizon(config)
    return float((4.0 * lam * config.forgetting ** horizon) ** (1.0 / horizon))


def _sample_box(config: StabilityConfig) -> np.ndarray:
    """Deterministic mesh over the box plus Latin-hypercube refinements."""
    lows, highs = config.state_lower, config.state_upper
    if config.input_lower is not None:
        lows = np.concatenate([lows, config.input_lower])
        highs = np.concatenate([highs, config.input_upper])
    axes = [np.linspace(lo, hi, config.grid_points)
            for lo, hi in zip(lows, highs)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.reshape(-1) for m in mesh], axis=1)
    if config.refinements > 0:
        sampler = qmc.LatinHypercube(d=lows.size, seed=config.seed)
        extra = qmc.scale(sampler.random(config.refinements), lows, highs)
        points = np.vstack([points, extra])
    return points


def estimate_alpha_max(model, f_true, h_true,
                       config: StabilityConfig) -> tuple[float, float, float]:
    """Sampled worst-case weighted error of the learned mean maps.

    Compares the learned one-step and output means against the callbacks
    `f_true(x, u)` and `h_true(x, u)` over the box, in the norms weighted by
    the inverse minimal weights. Returns (state error, output error, max).
    The result is a sample maximum, so it underestimates the true supremum;
    raise `grid_points`/`refinements` to tighten it.
    """
    points = _sample_box(config)
    states = points[:, :model.n]
    inputs = points[:, model.n:]
    ev = model.eval_window(states, inputs)
    f_ref = np.stack([np.asarray(f_true(x, u), dtype=float).reshape(model.n)
                      for x, u in zip(states, inputs)])
    h_ref = np.stack([np.asarray(h_true(x, u), dtype=float).reshape(model.p)
                      for x, u in zip(states, inputs)])
    lx = np.linalg.cholesky(config.caps.sigma_x_min)
    ly = np.linalg.cholesky(config.caps.sigma_y_min)
    res_x = solve_triangular(lx, (f_ref - ev.mean_f).T, lower=True)
    res_y = solve_triangular(ly, (h_ref - ev.mean_h).T, lower=True)
    alpha_x = float(np.max(np.linalg.norm(res_x, axis=0)))
    alpha_y = float(np.max(np.linalg.norm(res_y, axis=0)))
    return alpha_x, alpha_y, max(alpha_x, alpha_y)


@dataclass
class EstimationRun:
    """One simulated run: truth, injected noises and the estimate track.

    `states` and `estimates` have one more row than `inputs`: index t is the
    state at time t, with `process_noise[t]` acting on the transition t to
    t+1 and `measurement_noise[t]` on the output at time t. `prior_cov` is
    the uncertainty attached to `estimates[0]`.
    """

    states: np.ndarray
    inputs: np.ndarray
    process_noise: np.ndarray
    measurement_noise: np.ndarray
    estimates: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self) -> None:
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.estimates = np.atleast_2d(np.asarray(self.estimates, dtype=float))
        steps = self.states.shape[0] - 1
        n = self.states.shape[1]
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(steps, -1)
        self.process_noise = np.asarray(
            self.process_noise, dtype=float).reshape(steps, n)
        self.measurement_noise = np.atleast_2d(
            np.asarray(self.measurement_noise, dtype=float))
        if self.measurement_noise.shape[0] != steps:
            raise ValueError("measurement_noise must have one row per step")
        if self.estimates.shape != self.states.shape:
            raise ValueError("estimates must match the state trajectory shape")
        self.prior_cov = _check_pd(
            np.asarray(self.prior_cov, dtype=float), "prior_cov")


@dataclass
class PresBoundReport:
    """Per-step comparison of the estimation error against its bound.

    The bound is the max of four terms: a geometrically decaying initial
    error, discounted worst-case process and measurement noise terms, and a
    constant model-error floor. `applicable` is False when the contraction
    rate is not below one; the term columns are NaN in that case.
    """

    times: np.ndarray
    lhs: np.ndarray
    term_init: np.ndarray
    term_w: np.ndarray
    term_v: np.ndarray
    term_alpha: np.ndarray
    rhs: np.ndarray
    satisfied: np.ndarray
    mu: float
    alpha_max: float
    applicable: bool

    @property
    def violations(self) -> int:
        if not self.applicable:
            return 0
        return int(np.sum(~self.satisfied))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "lhs", "term_init", "term_w", "term_v",
                             "term_alpha", "satisfied"])
            for k in range(self.times.size):
                writer.writerow([int(self.times[k]), self.lhs[k],
                                 self.term_init[k], self.term_w[k],
                                 self.term_v[k], self.term_alpha[k],
                                 int(self.satisfied[k])])


def _weighted_norm(chol_lower: np.ndarray, vec: np.ndarray) -> float:
    """Norm of vec weighted by the inverse of chol_lower @ chol_lower.T."""
    return float(np.linalg.norm(
        solve_triangular(chol_lower, np.asarray(vec, dtype=float), lower=True)))


def _slice_eval(ev: WindowEval, lo: int, hi: int) -> WindowEval:
    return WindowEval(ev.mean_f[lo:hi], ev.mean_h[lo:hi], ev.var_x[lo:hi],
                      ev.var_y[lo:hi], ev.jac_f[lo:hi], ev.jac_h[lo:hi])


def _blockwise_weights(model, run: EstimationRun, config: StabilityConfig,
                       horizon: int, t: int, ev: WindowEval | None = None):
    """Stage weights along the true trajectory for steps 0..t-1.

    The recursion restarts from zero every `horizon` steps counting back
    from the anchor time t, so the weight at step s only accumulates
    uncertainty from within its own block.
    """
    sigma_x = [None] * t
    sigma_y = [None] * t
    hi = t
    while hi > 0:
        lo = max(0, hi - horizon)
        seg_ev = _slice_eval(ev, lo, hi) if ev is not None else None
        seg = propagation.propagate_window(
            model, run.states[lo:hi], run.inputs[lo:hi], config.noise,
            config.caps, ev=seg_ev)
        for i in range(hi - lo):
            sigma_x[lo + i] = seg.sigma_x_seq[i]
            sigma_y[lo + i] = seg.sigma_y_seq[i]
        hi = lo
    return sigma_x, sigma_y


def check_pres_bound(run: EstimationRun, model, mu: float, alpha_max: float,
                     config: StabilityConfig, horizon: int) -> PresBoundReport:
    """Evaluate the per-step error bound along a recorded run.

    The left-hand side is the estimation error in the norm weighted by the
    inverse inflated cap. Noise terms are weighted by the recursion along
    the true trajectory, restarted every `horizon` steps counting back from
    the current time, and discounted by mu**(q/4) with q the age of the
    noise sample. With mu >= 1 the bound does not apply (horizon too short)
    and the report only carries the raw errors.
    """
    if horizon < 1:
        raise ValueError("horizon must be positive")
    steps = run.inputs.shape[0]
    times = np.arange(steps + 1)
    err = run.estimates - run.states
    n = run.states.shape[1]
    lhs_chol = np.linalg.cholesky(
        config.caps.sigma_x_max + config.caps.epsilon * np.eye(n))
    lhs = np.array([_weighted_norm(lhs_chol, e) for e in err])
    if mu >= 1.0:
        nan = np.full(steps + 1, np.nan)
        return PresBoundReport(
            times=times, lhs=lhs, term_init=nan, term_w=nan.copy(),
            term_v=nan.copy(), term_alpha=nan.copy(), rhs=nan.copy(),
            satisfied=np.zeros(steps + 1, dtype=bool), mu=mu,
            alpha_max=alpha_max, applicable=False)
    init_err = _weighted_norm(np.linalg.cholesky(run.prior_cov), err[0])
    coef = 12.0 / (1.0 - mu ** 0.25)
    term_init = 6.0 * np.sqrt(mu) ** times * init_err
    term_alpha = np.full(steps + 1, coef * alpha_max)
    term_w = np.zeros(steps + 1)
    term_v = np.zeros(steps + 1)
    full_ev = (model.eval_window(run.states[:-1], run.inputs)
               if steps > 0 else None)
    for t in range(1, steps + 1):
        sigma_x, sigma_y = _blockwise_weights(
            model, run, config, horizon, t, full_ev)
        decay = mu ** ((t - 1 - np.arange(t)) / 4.0)
        w_norms = np.array([
            _weighted_norm(np.linalg.cholesky(sigma_x[s]),
                           run.process_noise[s]) for s in range(t)])
        v_norms = np.array([
            _weighted_norm(np.linalg.cholesky(sigma_y[s]),
                           run.measurement_noise[s]) for s in range(t)])
        term_w[t] = coef * float(np.max(decay * w_norms))
        term_v[t] = coef * float(np.max(decay * v_norms))
    rhs = np.maximum.reduce([term_init, term_w, term_v, term_alpha])
    return PresBoundReport(
        times=times, lhs=lhs, term_init=term_init, term_w=term_w,
        term_v=term_v, term_alpha=term_alpha, rhs=rhs,
        satisfied=lhs <= rhs, mu=mu, alpha_max=alpha_max, applicable=True)
