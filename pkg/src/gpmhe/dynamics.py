"""Learned transition and output maps built from per-dimension GPs.

The regression input at time t is the stacked vector d(t) = (x(t), u(t)).
Every state GP i is trained on targets x_i(t+1) and every output GP j on
targets y_j(t), all sharing one input matrix assembled from recorded
trajectories (the last step of each trajectory only supplies a state target,
so the shared inputs stop at step T-2).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import gp

DYNAMICS_FORMAT_VERSION = 1


@dataclass
class Trajectory:
    """One recorded rollout: states (T, n), inputs (T, m), outputs (T, p)."""

    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        steps = self.states.shape[0]
        if self.inputs.size == 0:
            self.inputs = np.zeros((steps, 0))
        else:
            self.inputs = np.atleast_2d(self.inputs)
        if self.inputs.shape[0] != steps or self.outputs.shape[0] != steps:
            raise ValueError("states, inputs and outputs must share a step count")
        for name, arr in (("states", self.states), ("inputs", self.inputs),
                          ("outputs", self.outputs)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite values")

    @property
    def steps(self) -> int:
        return self.states.shape[0]


@dataclass
class RegressionDataset:
    """Stacked regression rows from one or more trajectories."""

    inputs: np.ndarray          # (N, n + m)
    state_targets: np.ndarray   # (N, n)
    output_targets: np.ndarray  # (N, p)
    n: int
    m: int
    p: int

    @property
    def num_points(self) -> int:
        return self.inputs.shape[0]


def build_dataset(trajectories: list[Trajectory]) -> RegressionDataset:
    """Assemble shared regression inputs and per-dimension target columns."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    n = trajectories[0].states.shape[1]
    m = trajectories[0].inputs.shape[1]
    p = trajectories[0].outputs.shape[1]
    rows, fx, fy = [], [], []
    for traj in trajectories:
        if traj.states.shape[1] != n or traj.inputs.shape[1] != m \
                or traj.outputs.shape[1] != p:
            raise ValueError("trajectories disagree on dimensions")
        if traj.steps < 2:
            raise ValueError("each trajectory needs at least 2 steps")
        rows.append(np.hstack([traj.states[:-1], traj.inputs[:-1]]))
        fx.append(traj.states[1:])
        fy.append(traj.outputs[:-1])
    return RegressionDataset(
        inputs=np.vstack(rows),
        state_targets=np.vstack(fx),
        output_targets=np.vstack(fy),
        n=n, m=m, p=p,
    )


@dataclass
class WindowEval:
    """Batched model evaluation at Q regression inputs."""

    mean_f: np.ndarray                 # (Q, n)
    mean_h: np.ndarray                 # (Q, p)
    var_x: np.ndarray                  # (Q, n) one-step state variances
    var_y: np.ndarray                  # (Q, p)
    jac_f: np.ndarray                  # (Q, n, n) d mean_f / d x
    jac_h: np.ndarray                  # (Q, p, n)
    hess_f: np.ndarray | None = None   # (Q, n, d, d) over full input d
    hess_h: np.ndarray | None = None   # (Q, p, d, d)
    var_grad_x: np.ndarray | None = None  # (Q, n, d)
    var_grad_y: np.ndarray | None = None  # (Q, p, d)


class _GpBundle:
    """Stacked arrays for fast mean evaluation of GPs sharing inputs."""

    def __init__(self, models: list[gp.GpModel]):
        self.empty = not models or models[0].num_points == 0
        if self.empty:
            self.count = len(models)
            return
        self.count = len(models)
        x = models[0].inputs
        lens = np.stack([g.params.lengthscales for g in models])   # (g, d)
        self.inv_lens = 1.0 / lens
        self.scaled = x[None, :, :] * self.inv_lens[:, None, :]    # (g, N, d)
        self.scaled_sq = np.sum(self.scaled**2, axis=2)            # (g, N)
        self.sf2 = np.array([g.params.signal_variance for g in models])
        self.alphas = np.stack([g.alpha for g in models])          # (g, N)

    def point_means(self, d: np.ndarray) -> np.ndarray:
        """All stacked posterior means at one query point."""
        if self.empty:
            return np.zeros(self.count)
        ds = d[None, :] * self.inv_lens                            # (g, d)
        sq = self.scaled_sq - 2.0 * np.einsum("gnd,gd->gn", self.scaled, ds) \
            + np.sum(ds**2, axis=1)[:, None]
        kstar = self.sf2[:, None] * np.exp(-0.5 * np.maximum(sq, 0.0))
        return np.einsum("gn,gn->g", kstar, self.alphas)

    def batch_means(self, queries: np.ndarray) -> np.ndarray:
        """Stacked posterior means at Q query points, shape (Q, g)."""
        if self.empty:
            return np.zeros((queries.shape[0], self.count))
        qs = queries[None, :, :] * self.inv_lens[:, None, :]       # (g, Q, d)
        sq = self.scaled_sq[:, :, None] \
            + np.sum(qs**2, axis=2)[:, None, :] \
            - 2.0 * np.einsum("gnd,gqd->gnq", self.scaled, qs)
        kstar = self.sf2[:, None, None] * np.exp(-0.5 * np.maximum(sq, 0.0))
        return np.einsum("gnq,gn->qg", kstar, self.alphas)


class LearnedDynamics:
    """Bundle of n state GPs and p output GPs over shared inputs."""

    def __init__(self, state_gps: list[gp.GpModel], output_gps: list[gp.GpModel],
                 n: int, m: int):
        if not state_gps:
            raise ValueError("need at least one state GP")
        if len(state_gps) != n:
            raise ValueError("one state GP per state dimension required")
        ref = state_gps[0].inputs
        for model in [*state_gps, *output_gps]:
            if model.inputs.shape != ref.shape or not np.array_equal(model.inputs, ref):
                raise ValueError("all GPs must share the same training inputs")
            if model.dim != n + m:
                raise ValueError("GP input dimension must equal n + m")
        self.state_gps = state_gps
        self.output_gps = output_gps
        self.n = n
        self.m = m
        self.p = len(output_gps)
        self._state_bundle = _GpBundle(state_gps)
        self._output_bundle = _GpBundle(output_gps)

    def _stack(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.size != self.n or u.size != self.m:
            raise ValueError("state or input dimension mismatch")
        return np.concatenate([x, u])

    def mean_f(self, x, u=()) -> np.ndarray:
        return self._state_bundle.point_means(self._stack(x, u))

    def mean_h(self, x, u=()) -> np.ndarray:
        return self._output_bundle.point_means(self._stack(x, u))

    def mean_h_batch(self, states, inputs=None) -> np.ndarray:
        """Output means at a batch of points, shape (Q, p)."""
        states = np.asarray(states, dtype=float).reshape(-1, self.n)
        q = states.shape[0]
        if inputs is None:
            inputs = np.zeros((q, self.m))
        d = np.hstack([states, np.asarray(inputs, dtype=float).reshape(q, self.m)])
        return self._output_bundle.batch_means(d)

    def one_step_variances(self, x, u=()) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal one-step GP covariances (Sigma_x_os, Sigma_y_os)."""
        d = self._stack(x, u)[None, :]
        vx = [g.posterior_batch(d)[1][0] for g in self.state_gps]
        vy = [g.posterior_batch(d)[1][0] for g in self.output_gps]
        return np.diag(vx), np.diag(np.asarray(vy, dtype=float).reshape(self.p))

    def jacobians(self, x, u=()) -> tuple[np.ndarray, np.ndarray]:
        """State Jacobians (A, C) of the posterior means with respect to x."""
        d = self._stack(x, u)[None, :]
        a = np.vstack([g.mean_gradient_batch(d)[0][: self.n] for g in self.state_gps])
        if self.output_gps:
            c = np.vstack(
                [g.mean_gradient_batch(d)[0][: self.n] for g in self.output_gps]
            )
        else:
            c = np.zeros((0, self.n))
        return a, c

    def eval_window(self, states, inputs=None, need_hessians=False,
                    need_var_grads=False) -> WindowEval:
        """Evaluate means, variances and Jacobians at a batch of points."""
        states = np.asarray(states, dtype=float).reshape(-1, self.n)
        q = states.shape[0]
        if inputs is None:
            inputs = np.zeros((q, self.m))
        inputs = np.asarray(inputs, dtype=float).reshape(q, self.m)
        d = np.hstack([states, inputs])
        dim = self.n + self.m
        var_x = np.empty((q, self.n))
        jac_f = np.empty((q, self.n, self.n))
        var_y = np.empty((q, self.p))
        jac_h = np.empty((q, self.p, self.n))
        hess_f = np.empty((q, self.n, dim, dim)) if need_hessians else None
        hess_h = np.empty((q, self.p, dim, dim)) if need_hessians else None
        vg_x = np.empty((q, self.n, dim)) if need_var_grads else None
        vg_y = np.empty((q, self.p, dim)) if need_var_grads else None
        # means come from the stacked bundles so that batch and rollout
        # evaluations of the same point agree bitwise
        mean_f = self._state_bundle.batch_means(d)
        mean_h = self._output_bundle.batch_means(d)
        for i, model in enumerate(self.state_gps):
            var_x[:, i] = model.posterior_batch(d)[1]
            jac_f[:, i, :] = model.mean_gradient_batch(d)[:, : self.n]
            if need_hessians:
                hess_f[:, i] = model.mean_hessian_batch(d)
            if need_var_grads:
                vg_x[:, i] = model.variance_gradient_batch(d)
        for j, model in enumerate(self.output_gps):
            var_y[:, j] = model.posterior_batch(d)[1]
            jac_h[:, j, :] = model.mean_gradient_batch(d)[:, : self.n]
            if need_hessians:
                hess_h[:, j] = model.mean_hessian_batch(d)
            if need_var_grads:
                vg_y[:, j] = model.variance_gradient_batch(d)
        return WindowEval(mean_f, mean_h, var_x, var_y, jac_f, jac_h,
                          hess_f, hess_h, vg_x, vg_y)


def fit_dynamics(dataset: RegressionDataset, starts: int = 8, seed: int = 0,
                 max_iter: int = 150,
                 lengthscale_bounds: tuple[np.ndarray, np.ndarray] | None = None,
                 ) -> LearnedDynamics:
    """Tune hyperparameters and fit one GP per state and output dimension.

    `lengthscale_bounds` is forwarded to the hyperparameter search for every
    dimension; see `gp.optimize_hyperparameters`.
    """
    state_gps, output_gps = [], []
    for i in range(dataset.n):
        params = gp.optimize_hyperparameters(
            dataset.inputs, dataset.state_targets[:, i], starts=starts,
            seed=seed + i, max_iter=max_iter, lengthscale_bounds=lengthscale_bounds,
        )
        state_gps.append(gp.fit(dataset.inputs, dataset.state_targets[:, i], params))
    for j in range(dataset.p):
        params = gp.optimize_hyperparameters(
            dataset.inputs, dataset.output_targets[:, j], starts=starts,
            seed=seed + 1000 + j, max_iter=max_iter,
            lengthscale_bounds=lengthscale_bounds,
        )
        output_gps.append(gp.fit(dataset.inputs, dataset.output_targets[:, j], params))
    return LearnedDynamics(state_gps, output_gps, dataset.n, dataset.m)


def residuals(model, f_true, h_true, x, u, w, v) -> tuple[np.ndarray, np.ndarray]:
    """Effective disturbances of the learned system.

    w_resid = f(x, u) - mean_f(x, u) + w and likewise for the output map, so
    the learned transition reproduces the true one exactly when these replace
    (w, v).
    """
    w_resid = np.asarray(f_true(x, u), dtype=float) - model.mean_f(x, u) + w
    v_resid = np.asarray(h_true(x, u), dtype=float) - model.mean_h(x, u) + v
    return w_resid, v_resid


class TrueDynamics:
    """Exact model wrapped in the learned-dynamics interface.

    Posterior variances are zero and Jacobians come from callbacks or central
    finite differences. Used by the model-based estimator baselines.
    """

    def __init__(self, f, h, n: int, m: int, p: int, f_jac=None, h_jac=None,
                 fd_step: float = 1e-6):
        self.f = f
        self.h = h
        self.n, self.m, self.p = n, m, p
        self.f_jac = f_jac
        self.h_jac = h_jac
        self.fd_step = fd_step

    def mean_f(self, x, u=()) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, dtype=float),
                                 np.asarray(u, dtype=float)), dtype=float).reshape(self.n)

    def mean_h(self, x, u=()) -> np.ndarray:
        return np.asarray(self.h(np.asarray(x, dtype=float),
                                 np.asarray(u, dtype=float)), dtype=float).reshape(self.p)

    def mean_h_batch(self, states, inputs=None) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.n)
        q = states.shape[0]
        if inputs is None:
            inputs = np.zeros((q, self.m))
        inputs = np.asarray(inputs, dtype=float).reshape(q, self.m)
        return np.stack([self.mean_h(states[k], inputs[k]) for k in range(q)]) \
            if q else np.zeros((0, self.p))

    def one_step_variances(self, x, u=()) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros((self.n, self.n)), np.zeros((self.p, self.p))

    def _fd_jac(self, fn, out_dim, x, u):
        x = np.asarray(x, dtype=float)
        jac = np.empty((out_dim, self.n))
        for k in range(self.n):
            e = np.zeros(self.n)
            e[k] = self.fd_step
            hi = np.asarray(fn(x + e, u), dtype=float).reshape(out_dim)
            lo = np.asarray(fn(x - e, u), dtype=float).reshape(out_dim)
            jac[:, k] = (hi - lo) / (2 * self.fd_step)
        return jac

    def jacobians(self, x, u=()) -> tuple[np.ndarray, np.ndarray]:
        a = (np.asarray(self.f_jac(x, u), dtype=float) if self.f_jac
             else self._fd_jac(self.f, self.n, x, u))
        c = (np.asarray(self.h_jac(x, u), dtype=float) if self.h_jac
             else self._fd_jac(self.h, self.p, x, u))
        return a.reshape(self.n, self.n), c.reshape(self.p, self.n)

    def eval_window(self, states, inputs=None, need_hessians=False,
                    need_var_grads=False) -> WindowEval:
        states = np.asarray(states, dtype=float).reshape(-1, self.n)
        q = states.shape[0]
        if inputs is None:
            inputs = np.zeros((q, self.m))
        inputs = np.asarray(inputs, dtype=float).reshape(q, self.m)
        dim = self.n + self.m
        mean_f = np.empty((q, self.n))
        mean_h = np.empty((q, self.p))
        jac_f = np.empty((q, self.n, self.n))
        jac_h = np.empty((q, self.p, self.n))
        for k in range(q):
            mean_f[k] = self.mean_f(states[k], inputs[k])
            mean_h[k] = self.mean_h(states[k], inputs[k])
            jac_f[k], jac_h[k] = self.jacobians(states[k], inputs[k])
        hess = (np.zeros((q, self.n, dim, dim)), np.zeros((q, self.p, dim, dim))) \
            if need_hessians else (None, None)
        vgs = (np.zeros((q, self.n, dim)), np.zeros((q, self.p, dim))) \
            if need_var_grads else (None, None)
        return WindowEval(mean_f, mean_h, np.zeros((q, self.n)),
                          np.zeros((q, self.p)), jac_f, jac_h,
                          hess[0], hess[1], vgs[0], vgs[1])


# --- serialization ---------------------------------------------------------

def _csv_header(n: int, m: int, p: int) -> list[str]:
    return (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
        + [f"y{i + 1}" for i in range(p)]
        + ["trajectory_id"]
    )


def save_trajectories_csv(trajectories: list[Trajectory], path) -> None:
    """Write trajectories as rows t, x.., u.., y.., trajectory_id."""
    if not trajectories:
        raise ValueError("nothing to write")
    n = trajectories[0].states.shape[1]
    m = trajectories[0].inputs.shape[1]
    p = trajectories[0].outputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(n, m, p))
        for tid, traj in enumerate(trajectories):
            for t in range(traj.steps):
                row = (
                    [t]
                    + [f"{v:.17g}" for v in traj.states[t]]
                    + [f"{v:.17g}" for v in traj.inputs[t]]
                    + [f"{v:.17g}" for v in traj.outputs[t]]
                    + [tid]
                )
                writer.writerow(row)


def load_trajectories_csv(path) -> list[Trajectory]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        p = sum(1 for h in header if h.startswith("y"))
        if header != _csv_header(n, m, p):
            raise ValueError("unrecognized trajectory CSV header")
        groups: dict[int, list[list[float]]] = {}
        for row in reader:
            tid = int(row[-1])
            groups.setdefault(tid, []).append([float(v) for v in row[1:-1]])
    trajectories = []
    for tid in sorted(groups):
        block = np.asarray(groups[tid])
        trajectories.append(Trajectory(
            states=block[:, :n],
            inputs=block[:, n:n + m],
            outputs=block[:, n + m:],
        ))
    return trajectories


def dynamics_to_dict(model: LearnedDynamics) -> dict:
    """Versioned JSON document; shared inputs stored once."""
    return {
        "format_version": DYNAMICS_FORMAT_VERSION,
        "kind": "learned-dynamics",
        "n": model.n,
        "m": model.m,
        "p": model.p,
        "inputs": model.state_gps[0].inputs.tolist(),
        "state_gps": [_gp_entry(g) for g in model.state_gps],
        "output_gps": [_gp_entry(g) for g in model.output_gps],
    }


def _gp_entry(model: gp.GpModel) -> dict:
    return {
        "signal_variance": model.params.signal_variance,
        "lengthscales": model.params.lengthscales.tolist(),
        "noise_variance": model.params.noise_variance,
        "targets": model.targets.tolist(),
    }


def _gp_from_entry(entry: dict, inputs: np.ndarray) -> gp.GpModel:
    params = gp.KernelParams(
        signal_variance=float(entry["signal_variance"]),
        lengthscales=np.asarray(entry["lengthscales"], dtype=float),
        noise_variance=float(entry["noise_variance"]),
    )
    return gp.fit(inputs, np.asarray(entry["targets"], dtype=float), params)


def dynamics_from_dict(doc: dict) -> LearnedDynamics:
    if doc.get("kind") != "learned-dynamics":
        raise ValueError("not a learned-dynamics document")
    if doc.get("format_version") != DYNAMICS_FORMAT_VERSION:
        raise ValueError(
            f"unsupported dynamics format version {doc.get('format_version')}"
        )
    inputs = np.asarray(doc["inputs"], dtype=float)
    state_gps = [_gp_from_entry(e, inputs) for e in doc["state_gps"]]
    output_gps = [_gp_from_entry(e, inputs) for e in doc["output_gps"]]
    return LearnedDynamics(state_gps, output_gps, int(doc["n"]), int(doc["m"]))


def save_dynamics(model: LearnedDynamics, path) -> None:
    with open(path, "w") as fh:
        json.dump(dynamics_to_dict(model), fh)


def load_dynamics(path) -> LearnedDynamics:
    with open(path) as fh:
        return dynamics_from_dict(json.load(fh))
