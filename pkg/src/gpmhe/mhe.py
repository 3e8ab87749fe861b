"""Moving horizon estimation over learned dynamics.

The window cost is a discounted sum of weighted prior, process and output
residuals. Decision variables are the window's initial state plus the
process-noise sequence; window states follow by forward simulation through
the model mean, and output residuals are eliminated against the recorded
measurements. Stage weights are inverses of trajectory-dependent covariances
(propagated, one-step or constant); by default they are refreshed at each
iterate and held fixed inside the step (sequential reweighting), with the
full chain rule through the weight recursion kept as a validation mode.
State box constraints enter through a log barrier with a decreasing
coefficient; subproblems are solved by Levenberg-regularized Gauss-Newton.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import propagation
from .propagation import NoiseConfig, UncertaintyCaps

COST_MODES = ("propagated", "one_step", "constant")

_INTERIOR_MARGIN = 1e-6
_LEVENBERG_MAX = 1e10
_MIN_STEP = 1e-12
_ARMIJO = 1e-4


def _check_pd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-10:
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be positive definite") from exc
    return mat


def _check_box(lower, upper, name: str) -> tuple[np.ndarray, np.ndarray]:
    lower = np.asarray(lower, dtype=float).reshape(-1)
    upper = np.asarray(upper, dtype=float).reshape(-1)
    if lower.shape != upper.shape:
        raise ValueError(f"{name} bounds must have equal shapes")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError(f"{name} bounds must be finite")
    if np.any(lower >= upper):
        raise ValueError(f"{name} lower bounds must be strictly below upper")
    return lower, upper


def _project_interior(x: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                      margin: float = _INTERIOR_MARGIN) -> np.ndarray:
    """Clip into the box, keeping a small relative distance from the faces."""
    pad = margin * (upper - lower)
    return np.clip(np.asarray(x, dtype=float), lower + pad, upper - pad)


def _as_time_major(arr, name: str) -> np.ndarray:
    """Coerce a sample sequence to shape (T, dim); 1-D means scalar samples."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a (steps, dim) array")
    return arr


@dataclass
class MheConfig:
    """Estimator settings: horizon, discounting, weights and solver knobs."""

    state_lower: np.ndarray
    state_upper: np.ndarray
    noise: NoiseConfig
    caps: UncertaintyCaps
    horizon: int = 15
    forgetting: float = 0.91
    cost_mode: str = "propagated"
    prior_cov_init: np.ndarray | None = None
    freeze_weights_per_iteration: bool = True
    use_gershgorin_caps: bool = True
    barrier_init: float = 1e-2
    barrier_final: float = 1e-8
    barrier_decrease: float = 10.0
    kkt_tol: float = 1e-8
    max_iterations: int = 200
    stall_iterations: int = 5
    levenberg_init: float = 1e-8
    w_lower: np.ndarray | None = None
    w_upper: np.ndarray | None = None
    v_lower: np.ndarray | None = None
    v_upper: np.ndarray | None = None

    def __post_init__(self):
        self.state_lower, self.state_upper = _check_box(
            self.state_lower, self.state_upper, "state")
        n = self.state_lower.size
        if self.noise.sigma_w.shape != (n, n):
            raise ValueError("sigma_w must match the state dimension")
        p = self.noise.sigma_v.shape[0]
        if self.caps.sigma_x_max.shape != (n, n):
            raise ValueError("sigma_x_max must match the state dimension")
        if self.caps.sigma_y_max.shape != (p, p):
            raise ValueError("sigma_y_max must match the output dimension")
        if not self.caps.disable_cap:
            _check_pd(self.caps.sigma_x_max, "sigma_x_max")
            _check_pd(self.caps.sigma_y_max, "sigma_y_max")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"cost_mode must be one of {COST_MODES}")
        if self.prior_cov_init is None:
            self.prior_cov_init = np.eye(n)
        self.prior_cov_init = _check_pd(self.prior_cov_init, "prior_cov_init")
        if self.prior_cov_init.shape != (n, n):
            raise ValueError("prior_cov_init must match the state dimension")
        if not 0.0 < self.barrier_final <= self.barrier_init:
            raise ValueError("barrier coefficients must satisfy 0 < final <= init")
        if self.barrier_decrease <= 1.0:
            raise ValueError("barrier_decrease must exceed 1")
        if self.kkt_tol <= 0:
            raise ValueError("kkt_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.stall_iterations < 1:
            raise ValueError("stall_iterations must be at least 1")
        if self.levenberg_init <= 0:
            raise ValueError("levenberg_init must be positive")
        if (self.w_lower is None) != (self.w_upper is None):
            raise ValueError("w bounds must be given as a pair")
        if self.w_lower is not None:
            self.w_lower, self.w_upper = _check_box(self.w_lower, self.w_upper, "w")
            if self.w_lower.size != n:
                raise ValueError("w bounds must match the state dimension")
        if (self.v_lower is None) != (self.v_upper is None):
            raise ValueError("v bounds must be given as a pair")
        if self.v_lower is not None:
            self.v_lower, self.v_upper = _check_box(self.v_lower, self.v_upper, "v")
            if self.v_lower.size != p:
                raise ValueError("v bounds must match the output dimension")

    @property
    def n(self) -> int:
        return self.state_lower.size

    @property
    def p(self) -> int:
        return self.noise.sigma_v.shape[0]


@dataclass
class MheWindow:
    """One estimation window: inputs, outputs and the prior at its start."""

    inputs: np.ndarray          # (T, m)
    outputs: np.ndarray         # (T, p)
    prior_estimate: np.ndarray  # (n,)
    prior_cov: np.ndarray       # (n, n)

    def __post_init__(self):
        self.inputs = _as_time_major(self.inputs, "inputs")
        self.outputs = _as_time_major(self.outputs, "outputs")
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs must cover the same steps")
        self.prior_estimate = np.asarray(self.prior_estimate,
                                         dtype=float).reshape(-1)
        self.prior_cov = _check_pd(self.prior_cov, "prior_cov")
        if self.prior_cov.shape[0] != self.prior_estimate.size:
            raise ValueError("prior_cov must match the prior estimate")

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


@dataclass
class MheSolution:
    """Optimal window trajectory plus solver and uncertainty diagnostics.

    `converged` means the KKT residual met the tolerance or the final
    barrier subproblem hit its resolution limit: either no representable
    step decreases the merit, or rebuilding the state-dependent weights
    stopped improving it (the reweighting fixed point only resolves the
    merit to a small noise ball). `kkt_residual` always reports the actual
    frozen-weight gradient norm.
    """

    states: np.ndarray          # (T + 1, n)
    w: np.ndarray               # (T, n)
    v: np.ndarray               # (T, p)
    cost: float
    kkt_residual: float
    iterations: int
    converged: bool
    estimate: np.ndarray        # states[-1]
    current_cov: np.ndarray     # state uncertainty carried to the estimate time
    diagnostics: dict = field(default_factory=dict)


class _WindowProblem:
    """Dense single-shooting formulation of one window."""

    def __init__(self, window: MheWindow, model, config: MheConfig):
        if model.n != config.n:
            raise ValueError("model and config disagree on the state dimension")
        if model.p != config.p:
            raise ValueError("model and config disagree on the output dimension")
        if window.prior_estimate.size != config.n:
            raise ValueError("window prior must match the state dimension")
        if window.length and window.outputs.shape[1] != config.p:
            raise ValueError("window outputs must match the output dimension")
        self.model = model
        self.cfg = config
        self.window = window
        self.n = config.n
        self.p = config.p
        self.q = window.length
        self.nz = self.n * (self.q + 1)
        self.lo = config.state_lower
        self.hi = config.state_upper
        self.inputs = window.inputs
        self.outputs = window.outputs

        self.prior_ref = window.prior_estimate.copy()
        if np.any(self.prior_ref < self.lo) or np.any(self.prior_ref > self.hi):
            warnings.warn("prior estimate lies outside the state box; projecting",
                          RuntimeWarning, stacklevel=2)
            self.prior_ref = _project_interior(self.prior_ref, self.lo, self.hi)

        eta = config.forgetting
        self.stage_disc = 2.0 * eta ** np.arange(self.q - 1, -1, -1, dtype=float)
        self.prior_disc = 2.0 * eta ** self.q
        self.prior_ichol = np.linalg.inv(np.linalg.cholesky(window.prior_cov))

    # -- trajectory handling --------------------------------------------

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float).reshape(self.nz)
        return z[: self.n], z[self.n:].reshape(self.q, self.n)

    def simulate(self, z: np.ndarray) -> np.ndarray:
        """Roll the mean dynamics forward from x_0 under the disturbances."""
        x0, w = self.split(z)
        states = np.empty((self.q + 1, self.n))
        states[0] = x0
        for s in range(self.q):
            states[s + 1] = self.model.mean_f(states[s], self.inputs[s]) + w[s]
        return states

    def default_start(self) -> np.ndarray:
        z = np.zeros(self.nz)
        z[: self.n] = _project_interior(self.prior_ref, self.lo, self.hi)
        return z

    def make_feasible(self, z: np.ndarray) -> np.ndarray:
        """Clip the rollout into the box interior, absorbing clips into w."""
        x0, w = self.split(z)
        x0 = _project_interior(x0, self.lo, self.hi)
        w = w.copy()
        if self.cfg.w_lower is not None:
            w = _project_interior(w, self.cfg.w_lower, self.cfg.w_upper)
        state = x0
        for s in range(self.q):
            mean = self.model.mean_f(state, self.inputs[s])
            nxt = np.nan_to_num(mean + w[s], nan=0.0,
                                posinf=np.max(self.hi), neginf=np.min(self.lo))
            clipped = _project_interior(nxt, self.lo, self.hi)
            w[s] = clipped - mean
            state = clipped
        return np.concatenate([x0, w.reshape(-1)])

    # -- weights ----------------------------------------------------------

    def stage_weights(self, ev) -> tuple[np.ndarray, np.ndarray]:
        """Per-stage covariances whose inverses weight w and v residuals."""
        cfg = self.cfg
        q, n, p = self.q, self.n, self.p
        sx = np.empty((q, n, n))
        sy = np.empty((q, p, p))
        if cfg.cost_mode == "constant":
            sx[:] = cfg.noise.sigma_w
            sy[:] = cfg.noise.sigma_v
        elif cfg.cost_mode == "one_step":
            for s in range(q):
                sx[s] = cfg.noise.sigma_w + np.diag(ev.var_x[s])
                sy[s] = cfg.noise.sigma_v + np.diag(ev.var_y[s])
        else:
            sigma = np.zeros((n, n))
            for s in range(q):
                sx[s] = propagation.propagate_x(
                    sigma, np.diag(ev.var_x[s]), ev.jac_f[s], cfg.noise,
                    cfg.caps, cfg.use_gershgorin_caps)
                sy[s] = propagation.propagate_y(
                    sigma, np.diag(ev.var_y[s]), ev.jac_h[s], cfg.noise,
                    cfg.caps, cfg.use_gershgorin_caps)
                sigma = sx[s]
        return sx, sy

    def weight_grads(self, ev, sens, sx, sy) -> tuple[np.ndarray, np.ndarray]:
        """Derivatives of the stage covariances along the decision variables.

        Capped stages contribute zero: there the PSD-order minimum locally
        equals the constant cap. Shapes (q, nz, n, n) and (q, nz, p, p).
        """
        cfg = self.cfg
        q, n, p, nz = self.q, self.n, self.p, self.nz
        dsx = np.zeros((q, nz, n, n))
        dsy = np.zeros((q, nz, p, p))
        if cfg.cost_mode == "constant" or q == 0:
            return dsx, dsy
        dim = ev.hess_f.shape[-1] if ev.hess_f is not None else n
        zeros_hf = np.zeros((n, dim, dim))
        zeros_hh = np.zeros((p, dim, dim))
        rng_n = np.arange(n)
        rng_p = np.arange(p)
        sigma = np.zeros((n, n))
        dsig = np.zeros((nz, n, n))
        for s in range(q):
            ss = sens[s]
            hf = ev.hess_f[s] if ev.hess_f is not None else zeros_hf
            hh = ev.hess_h[s] if ev.hess_h is not None else zeros_hh
            dvx = (ev.var_grad_x[s][:, :n] @ ss
                   if ev.var_grad_x is not None else np.zeros((n, nz)))
            dvy = (ev.var_grad_y[s][:, :n] @ ss
                   if ev.var_grad_y is not None else np.zeros((p, nz)))
            if cfg.cost_mode == "one_step":
                dsx[s][:, rng_n, rng_n] = dvx.T
                dsy[s][:, rng_p, rng_p] = dvy.T
                continue
            a_jac = ev.jac_f[s]
            c_jac = ev.jac_h[s]
            da = np.einsum("ijl,lk->kij", hf[:, :n, :n], ss)
            dc = np.einsum("pjl,lk->kpj", hh[:, :n, :n], ss)
            cand_x = da @ sigma @ a_jac.T
            cand_x = cand_x + cand_x.transpose(0, 2, 1)
            cand_x += np.einsum("ij,kjl,ml->kim", a_jac, dsig, a_jac)
            cand_x[:, rng_n, rng_n] += dvx.T
            cand_y = dc @ sigma @ c_jac.T
            cand_y = cand_y + cand_y.transpose(0, 2, 1)
            cand_y += np.einsum("pj,kjl,ql->kpq", c_jac, dsig, c_jac)
            cand_y[:, rng_p, rng_p] += dvy.T
            raw_x = cfg.noise.sigma_w + np.diag(ev.var_x[s]) \
                + a_jac @ sigma @ a_jac.T
            raw_y = cfg.noise.sigma_v + np.diag(ev.var_y[s]) \
                + c_jac @ sigma @ c_jac.T
            if cfg.caps.disable_cap or np.array_equal(
                    sx[s], 0.5 * (raw_x + raw_x.T)):
                dsx[s] = cand_x
            if cfg.caps.disable_cap or np.array_equal(
                    sy[s], 0.5 * (raw_y + raw_y.T)):
                dsy[s] = cand_y
            dsig = dsx[s]
            sigma = sx[s]
        return dsx, dsy

    @staticmethod
    def weight_factors(sx: np.ndarray, sy: np.ndarray) \
            -> tuple[np.ndarray, np.ndarray]:
        """Inverse Cholesky factors of the stage covariances."""
        icx = np.linalg.inv(np.linalg.cholesky(sx)) if sx.size else sx
        icy = np.linalg.inv(np.linalg.cholesky(sy)) if sy.size else sy
        return icx, icy

    # -- cost pieces -------------------------------------------------------

    def sensitivities(self, ev) -> np.ndarray:
        """d states[s] / d z under the mean dynamics, shape (q+1, n, nz)."""
        q, n, nz = self.q, self.n, self.nz
        sens = np.zeros((q + 1, n, nz))
        sens[0, :, :n] = np.eye(n)
        for s in range(q):
            nxt = ev.jac_f[s] @ sens[s]
            nxt[:, n * (1 + s): n * (2 + s)] += np.eye(n)
            sens[s + 1] = nxt
        return sens

    def residual_jacobian(self, z, states, ev, icx, icy, sens) \
            -> tuple[np.ndarray, np.ndarray]:
        """Stacked weighted residuals and their Jacobian in z."""
        q, n, p, nz = self.q, self.n, self.p, self.nz
        _, w = self.split(z)
        v = self.outputs - ev.mean_h if q else np.zeros((0, p))
        r = np.empty(n + q * (n + p))
        jac = np.zeros((r.size, nz))
        sp = np.sqrt(self.prior_disc)
        r[:n] = sp * (self.prior_ichol @ (states[0] - self.prior_ref))
        jac[:n, :n] = sp * self.prior_ichol
        sqw = np.sqrt(self.stage_disc)
        row = n
        for s in range(q):
            r[row: row + n] = sqw[s] * (icx[s] @ w[s])
            jac[row: row + n, n * (1 + s): n * (2 + s)] = sqw[s] * icx[s]
            row += n
            r[row: row + p] = sqw[s] * (icy[s] @ v[s])
            jac[row: row + p] = -sqw[s] * ((icy[s] @ ev.jac_h[s]) @ sens[s])
            row += p
        return r, jac

    def barrier_value(self, states, z, mean_h=None) -> float:
        """Log barrier over the state box plus optional w and v boxes."""
        terms = [(states, self.lo, self.hi)]
        cfg = self.cfg
        if cfg.w_lower is not None and self.q:
            terms.append((self.split(z)[1], cfg.w_lower, cfg.w_upper))
        if cfg.v_lower is not None and self.q:
            if mean_h is None:
                mean_h = self.model.mean_h_batch(states[:-1], self.inputs)
            terms.append((self.outputs - mean_h, cfg.v_lower, cfg.v_upper))
        total = 0.0
        for vals, lo, hi in terms:
            gl = vals - lo
            gu = hi - vals
            if gl.size and (np.min(gl) <= 0 or np.min(gu) <= 0):
                return np.inf
            total -= float(np.sum(np.log(gl)) + np.sum(np.log(gu)))
        return total

    def barrier_grad_hess(self, states, z, sens, ev) \
            -> tuple[np.ndarray, np.ndarray]:
        """Gradient and Gauss-Newton Hessian of the barrier term."""
        q, n, nz = self.q, self.n, self.nz
        cfg = self.cfg
        grad = np.zeros(nz)
        hess = np.zeros((nz, nz))
        for s in range(q + 1):
            gl = states[s] - self.lo
            gu = self.hi - states[s]
            db = 1.0 / gu - 1.0 / gl
            d2 = 1.0 / gl**2 + 1.0 / gu**2
            ss = sens[s]
            grad += ss.T @ db
            hess += (ss.T * d2) @ ss
        if cfg.w_lower is not None and q:
            w = self.split(z)[1]
            gl = w - cfg.w_lower
            gu = cfg.w_upper - w
            grad[n:] += (1.0 / gu - 1.0 / gl).reshape(-1)
            idx = np.arange(n, nz)
            hess[idx, idx] += (1.0 / gl**2 + 1.0 / gu**2).reshape(-1)
        if cfg.v_lower is not None and q:
            v = self.outputs - ev.mean_h
            gl = v - cfg.v_lower
            gu = cfg.v_upper - v
            db = 1.0 / gu - 1.0 / gl
            d2 = 1.0 / gl**2 + 1.0 / gu**2
            for s in range(q):
                jv = -(ev.jac_h[s] @ sens[s])
                grad += jv.T @ db[s]
                hess += (jv.T * d2[s]) @ jv
        return grad, hess

    def objective(self, states, z, factors, mean_h) -> float:
        """Discounted cost at a simulated trajectory with fixed factors.

        Every merit evaluation in the solver goes through this one routine
        so that identical iterates produce bitwise-identical values.
        """
        _, w = self.split(z)
        e0 = self.prior_ichol @ (states[0] - self.prior_ref)
        val = self.prior_disc * float(e0 @ e0)
        if self.q:
            icx, icy = factors
            ew = np.einsum("sij,sj->si", icx, w)
            ey = np.einsum("sij,sj->si", icy, self.outputs - mean_h)
            val += float(self.stage_disc @ np.sum(ew**2, axis=1))
            val += float(self.stage_disc @ np.sum(ey**2, axis=1))
        return val

    def value(self, z, factors=None) -> tuple[float, float, np.ndarray]:
        """Cost and barrier at z; `factors` freezes the stage weights."""
        states = self.simulate(z)
        if not np.all(np.isfinite(states)):
            return np.inf, np.inf, states
        if factors is None and self.q:
            ev = self.model.eval_window(states[:-1], self.inputs)
            factors = self.weight_factors(*self.stage_weights(ev))
            mean_h = ev.mean_h
        else:
            mean_h = (self.model.mean_h_batch(states[:-1], self.inputs)
                      if self.q else np.zeros((0, self.p)))
        return (self.objective(states, z, factors, mean_h),
                self.barrier_value(states, z, mean_h), states)


def cost(z, window: MheWindow, model, config: MheConfig) \
        -> tuple[float, np.ndarray]:
    """Window cost and its gradient at the single-shooting point z.

    With frozen weights the gradient treats the stage covariances as
    constants evaluated at z; otherwise it carries the full chain rule
    through the weight recursion (capped stages contribute zero).
    """
    prob = _WindowProblem(window, model, config)
    z = np.asarray(z, dtype=float).reshape(prob.nz)
    states = prob.simulate(z)
    if not np.all(np.isfinite(states)):
        raise ValueError("trajectory leaves the finite domain")
    full = (not config.freeze_weights_per_iteration
            and config.cost_mode != "constant" and prob.q > 0)
    ev = (model.eval_window(states[:-1], prob.inputs, need_hessians=full,
                            need_var_grads=full)
          if prob.q else None)
    sens = prob.sensitivities(ev)
    if prob.q:
        sx, sy = prob.stage_weights(ev)
        icx, icy = prob.weight_factors(sx, sy)
    else:
        sx = sy = icx = icy = np.zeros((0, 0, 0))
    r, jac = prob.residual_jacobian(z, states, ev, icx, icy, sens)
    grad = 2.0 * (jac.T @ r)
    if full:
        dsx, dsy = prob.weight_grads(ev, sens, sx, sy)
        _, w = prob.split(z)
        v = prob.outputs - ev.mean_h
        for s in range(prob.q):
            ux = icx[s].T @ (icx[s] @ w[s])
            uy = icy[s].T @ (icy[s] @ v[s])
            grad -= prob.stage_disc[s] * np.einsum("kij,i,j->k", dsx[s], ux, ux)
            grad -= prob.stage_disc[s] * np.einsum("kij,i,j->k", dsy[s], uy, uy)
    return float(r @ r), grad


def _barrier_schedule(config: MheConfig) -> list[float]:
    levels = []
    mu = config.barrier_init
    while mu > config.barrier_final * (1.0 + 1e-12):
        levels.append(mu)
        mu /= config.barrier_decrease
    levels.append(config.barrier_final)
    return levels


def solve(window: MheWindow, model, config: MheConfig,
          z0: np.ndarray | None = None) -> MheSolution:
    """Solve one window by barrier continuation over Gauss-Newton steps."""
    prob = _WindowProblem(window, model, config)
    n, p, q, nz = prob.n, prob.p, prob.q, prob.nz

    if q == 0:
        est = prob.default_start()[:n]
        return MheSolution(
            states=est[None, :].copy(), w=np.zeros((0, n)), v=np.zeros((0, p)),
            cost=0.0, kkt_residual=0.0, iterations=0, converged=True,
            estimate=est, current_cov=window.prior_cov.copy(),
            diagnostics={"barrier_levels": 0, "step_failures": 0})

    z = prob.make_feasible(np.asarray(z0, dtype=float).reshape(nz)
                           if z0 is not None else prob.default_start())
    frozen = config.freeze_weights_per_iteration
    full = not frozen and config.cost_mode != "constant"

    def linearize(at):
        states = prob.simulate(at)
        ev = model.eval_window(states[:-1], prob.inputs, need_hessians=full,
                               need_var_grads=full)
        sens = prob.sensitivities(ev)
        sx, sy = prob.stage_weights(ev)
        icx, icy = prob.weight_factors(sx, sy)
        r, jac = prob.residual_jacobian(at, states, ev, icx, icy, sens)
        grad_j = 2.0 * (jac.T @ r)
        if full:
            dsx, dsy = prob.weight_grads(ev, sens, sx, sy)
            _, w = prob.split(at)
            v = prob.outputs - ev.mean_h
            for s in range(q):
                ux = icx[s].T @ (icx[s] @ w[s])
                uy = icy[s].T @ (icy[s] @ v[s])
                grad_j -= prob.stage_disc[s] * np.einsum("kij,i,j->k",
                                                         dsx[s], ux, ux)
                grad_j -= prob.stage_disc[s] * np.einsum("kij,i,j->k",
                                                         dsy[s], uy, uy)
        bg, bh = prob.barrier_grad_hess(states, at, sens, ev)
        bval = prob.barrier_value(states, at, ev.mean_h)
        jval = prob.objective(states, at, (icx, icy), ev.mean_h)
        return dict(states=states, ev=ev, icx=icx, icy=icy, sx=sx, sy=sy,
                    r=r, jac=jac, grad_j=grad_j, bg=bg, bh=bh, bval=bval,
                    jval=jval)

    lin: dict = {}
    lin_z = None
    total_iters = 0
    step_failures = 0
    kkt = np.inf
    at_floor = False
    identity = np.eye(nz)
    trace: list[tuple] = []
    schedule = _barrier_schedule(config)
    # persistent Levenberg parameter: grows when the quadratic model
    # overshoots (missing residual curvature), relaxes on clean full steps
    lev = config.levenberg_init

    for level, mu in enumerate(schedule):
        final_level = level == len(schedule) - 1
        inner_tol = max(config.kkt_tol, mu)
        best_merit = np.inf
        stall_count = 0
        while True:
            if lin_z is None or not np.array_equal(lin_z, z):
                lin = linearize(z)
                lin_z = z.copy()
            if not np.isfinite(lin["bval"]):
                raise ValueError("iterate infeasible for the barrier; "
                                 "check the w/v bounds against the data")
            grad = lin["grad_j"] + mu * lin["bg"]
            kkt = float(np.max(np.abs(grad)))
            if kkt <= inner_tol or total_iters >= config.max_iterations:
                break
            merit0 = lin["jval"] + mu * lin["bval"]
            # with state-dependent weights the outer loop is a fixed-point
            # iteration; when rebuilding the weights stops improving the
            # merit the level is resolved even though the frozen-weight
            # gradient keeps jittering inside the noise ball
            if merit0 < best_merit - 1e-9 * (1.0 + abs(best_merit)):
                best_merit = merit0
                stall_count = 0
            else:
                stall_count += 1
                if stall_count >= config.stall_iterations:
                    at_floor |= final_level
                    break
            hess = 2.0 * (lin["jac"].T @ lin["jac"]) + mu * lin["bh"]
            # merit changes below this are float noise, not progress
            floor_tol = 1e-12 * (1.0 + abs(merit0))
            accepted = False
            flat = False
            alpha = 1.0
            dz = None
            while lev <= _LEVENBERG_MAX and not flat:
                try:
                    fac = cho_factor(hess + lev * identity, lower=True)
                    dz = cho_solve(fac, -grad)
                except np.linalg.LinAlgError:
                    lev *= 10.0
                    continue
                if not np.all(np.isfinite(dz)):
                    lev *= 10.0
                    continue
                slope = float(grad @ dz)
                if slope >= 0.0:
                    lev *= 10.0
                    continue
                alpha = 1.0
                while alpha >= _MIN_STEP:
                    trial = z + alpha * dz
                    jt, bt, _ = prob.value(
                        trial, (lin["icx"], lin["icy"]) if frozen else None)
                    merit = jt + mu * bt
                    if np.isfinite(merit) and \
                            merit <= merit0 + _ARMIJO * alpha * slope:
                        accepted = True
                        break
                    if alpha <= 1e-4 and np.isfinite(merit) and \
                            abs(merit - merit0) <= floor_tol:
                        flat = True
                        break
                    alpha *= 0.5
                if accepted:
                    break
                lev *= 100.0
            total_iters += 1
            trace.append((mu, kkt, lev, alpha if accepted else 0.0, merit0))
            if not accepted:
                step_failures += 1
                at_floor |= final_level and flat
                lev = max(lev / 100.0, config.levenberg_init)
                break
            if alpha >= 0.5:
                lev = max(0.1 * lev, config.levenberg_init)
            elif alpha < 0.1:
                lev = min(10.0 * lev, _LEVENBERG_MAX)
            moved = alpha * dz
            z = z + moved
            lin_z = None
            if np.max(np.abs(moved)) <= 1e-14 * (1.0 + np.max(np.abs(z))):
                at_floor |= final_level
                break

    if lin_z is None or not np.array_equal(lin_z, z):
        lin = linearize(z)
    states = lin["states"]
    _, w = prob.split(z)
    v = prob.outputs - lin["ev"].mean_h
    grad = lin["grad_j"] + config.barrier_final * lin["bg"]
    kkt = float(np.max(np.abs(grad)))

    if config.cost_mode == "propagated":
        carried = propagation.propagate_window(
            model, states[:-1], prob.inputs, config.noise, config.caps,
            ev=lin["ev"]).prior_sigma
    elif config.cost_mode == "one_step":
        carried = config.noise.sigma_w + np.diag(lin["ev"].var_x[-1])
    else:
        carried = config.prior_cov_init.copy()

    return MheSolution(
        states=states, w=w.copy(), v=v, cost=lin["jval"],
        kkt_residual=kkt, iterations=total_iters,
        converged=kkt <= config.kkt_tol or at_floor,
        estimate=states[-1].copy(),
        current_cov=carried,
        diagnostics={
            "barrier_levels": len(_barrier_schedule(config)),
            "step_failures": step_failures,
            "sigma_x_seq": lin["sx"], "sigma_y_seq": lin["sy"],
            "trace": trace,
            "prior_projected": bool(
                np.any(window.prior_estimate < config.state_lower)
                or np.any(window.prior_estimate > config.state_upper)),
        })


class MovingHorizonEstimator:
    """Recursive wrapper: ring buffers for data and priors, warm starts.

    Each call to `step` consumes the previous input and the measured output,
    extends the window (sliding once it holds `horizon` steps), looks up the
    prior produced `horizon` steps ago and solves the window problem warm
    started from the shifted previous solution.
    """

    def __init__(self, model, config: MheConfig, x0_hat):
        if model.n != config.n or model.p != config.p:
            raise ValueError("model and config dimensions disagree")
        self.model = model
        self.config = config
        self.reset(x0_hat)

    def reset(self, x0_hat) -> None:
        x0 = np.asarray(x0_hat, dtype=float).reshape(self.config.n)
        self.t = 0
        self.history: deque = deque(maxlen=self.config.horizon + 1)
        self.history.append((0, x0.copy(), self.config.prior_cov_init.copy()))
        self.data: deque = deque(maxlen=self.config.horizon)
        self.estimate = x0.copy()
        self.current_cov = self.config.prior_cov_init.copy()
        self._prev: MheSolution | None = None

    def _warm_start(self, length: int) -> np.ndarray | None:
        prev = self._prev
        if prev is None:
            return None
        n = self.config.n
        pad = np.zeros((1, n))
        if length == prev.w.shape[0] + 1:
            x0 = prev.states[0]
            w = np.vstack([prev.w, pad])
        else:
            x0 = prev.states[1]
            w = np.vstack([prev.w[1:], pad])
        return np.concatenate([x0, w.reshape(-1)])

    def _carried_cov(self, solution: MheSolution) -> np.ndarray:
        """Covariance stored with the new estimate for future window priors."""
        return solution.current_cov

    def step(self, u_prev, y_prev) -> MheSolution:
        """Advance one sample: estimate x(t) from data up to time t - 1."""
        u = np.asarray(u_prev, dtype=float).reshape(-1)
        y = np.asarray(y_prev, dtype=float).reshape(self.config.p)
        self.data.append((u, y))
        self.t += 1
        length = len(self.data)
        prior_time = self.t - length
        prior = next((h for h in self.history if h[0] == prior_time), None)
        if prior is None:
            raise RuntimeError("prior for the window start is missing")
        window = MheWindow(
            inputs=np.stack([d[0] for d in self.data]),
            outputs=np.stack([d[1] for d in self.data]),
            prior_estimate=prior[1], prior_cov=prior[2])
        solution = solve(window, self.model, self.config,
                         self._warm_start(length))
        carried = self._carried_cov(solution)
        self.history.append((self.t, solution.estimate.copy(), carried.copy()))
        self.estimate = solution.estimate.copy()
        self.current_cov = carried.copy()
        self._prev = solution
        return solution
