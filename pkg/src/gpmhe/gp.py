"""Exact Gaussian process regression with a squared-exponential ARD kernel.

Dense, double-precision implementation: a model is fit with one Cholesky
factorization of the regularized Gram matrix, and hyperparameters are tuned by
multi-start gradient ascent on the log marginal likelihood in log space.
Posterior means are zero-mean priors plus the usual kernel smoother, so they
are bounded functions of the query point.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky

JITTER_START = 1e-10
JITTER_MAX = 1e-6

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential ARD kernel hyperparameters.

    signal_variance and noise_variance are variances (not standard
    deviations); lengthscales has one positive entry per input dimension.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError("signal_variance must be positive and finite")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ValueError("noise_variance must be positive and finite")
        if ls.ndim != 1 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("lengthscales must be a 1-d positive vector")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_log_vector(self) -> np.ndarray:
        return np.log(
            np.concatenate(
                ([self.signal_variance], self.lengthscales, [self.noise_variance])
            )
        )

    @staticmethod
    def from_log_vector(v: np.ndarray) -> "KernelParams":
        v = np.asarray(v, dtype=float)
        return KernelParams(
            signal_variance=float(np.exp(v[0])),
            lengthscales=np.exp(v[1:-1]),
            noise_variance=float(np.exp(v[-1])),
        )


def se_kernel(d1: np.ndarray, d2: np.ndarray, params: KernelParams) -> float:
    """Squared-exponential ARD kernel value for a single pair of points."""
    d1 = np.asarray(d1, dtype=float).ravel()
    d2 = np.asarray(d2, dtype=float).ravel()
    if d1.shape != d2.shape or d1.size != params.dim:
        raise ValueError("kernel arguments must match the lengthscale dimension")
    z = (d1 - d2) / params.lengthscales
    return float(params.signal_variance * np.exp(-0.5 * np.dot(z, z)))


def se_kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Cross-kernel matrix k(a_i, b_j) of shape (len(a), len(b))."""
    a = np.asarray(a, dtype=float).reshape(-1, params.dim)
    b = np.asarray(b, dtype=float).reshape(-1, params.dim)
    asc = a / params.lengthscales
    bsc = b / params.lengthscales
    sq = (
        np.sum(asc**2, axis=1)[:, None]
        + np.sum(bsc**2, axis=1)[None, :]
        - 2.0 * asc @ bsc.T
    )
    np.maximum(sq, 0.0, out=sq)
    return params.signal_variance * np.exp(-0.5 * sq)


def _regularized_gram(inputs: np.ndarray, params: KernelParams) -> np.ndarray:
    k = se_kernel_matrix(inputs, inputs, params)
    k[np.diag_indices_from(k)] += params.noise_variance
    return k


def _chol_with_jitter(gram: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter if needed."""
    jitter = 0.0
    while True:
        try:
            return cholesky(gram + jitter * np.eye(gram.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX:
            raise np.linalg.LinAlgError(
                "Gram matrix not positive definite even with jitter "
                f"{JITTER_MAX:g}"
            )


@dataclass
class GpModel:
    """Fitted GP: training data, hyperparameters and cached Cholesky factor.

    `alpha` is (K + sigma_eps^2 I)^-1 y and `gram_inverse` the full inverse,
    kept dense because training sets here are small (tens to a few hundred
    points). An empty model (no data) is allowed and falls back to the prior.
    """

    params: KernelParams
    inputs: np.ndarray
    targets: np.ndarray
    chol_factor: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    gram_inverse: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def num_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.params.dim

    def posterior(self, d: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance at one query point."""
        means, variances = self.posterior_batch(np.asarray(d, dtype=float)[None, :])
        return float(means[0]), float(variances[0])

    def posterior_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means and variances at rows of `queries` (Q, dim)."""
        queries = np.asarray(queries, dtype=float).reshape(-1, self.dim)
        if self.num_points == 0:
            q = queries.shape[0]
            return np.zeros(q), np.full(q, self.params.signal_variance)
        kstar = se_kernel_matrix(self.inputs, queries, self.params)
        means = kstar.T @ self.alpha
        variances = self.params.signal_variance - np.einsum(
            "nq,nq->q", kstar, self.gram_inverse @ kstar
        )
        np.maximum(variances, 0.0, out=variances)
        return means, variances

    def mean_gradient(self, d: np.ndarray) -> np.ndarray:
        """Gradient of the posterior mean with respect to the query point."""
        return self.mean_gradient_batch(np.asarray(d, dtype=float)[None, :])[0]

    def mean_gradient_batch(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean gradients, shape (Q, dim)."""
        queries = np.asarray(queries, dtype=float).reshape(-1, self.dim)
        if self.num_points == 0:
            return np.zeros_like(queries)
        kstar = se_kernel_matrix(self.inputs, queries, self.params)
        w = kstar * self.alpha[:, None]
        s = w.sum(axis=0)
        t = w.T @ self.inputs
        return -(queries * s[:, None] - t) / self.params.lengthscales**2

    def mean_hessian_batch(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean Hessians, shape (Q, dim, dim)."""
        queries = np.asarray(queries, dtype=float).reshape(-1, self.dim)
        q, d = queries.shape
        if self.num_points == 0:
            return np.zeros((q, d, d))
        inv_sq = 1.0 / self.params.lengthscales**2
        kstar = se_kernel_matrix(self.inputs, queries, self.params)
        w = kstar * self.alpha[:, None]
        delta = (queries[None, :, :] - self.inputs[:, None, :]) * inv_sq
        hess = np.einsum("nq,nqi,nqj->qij", w, delta, delta)
        hess -= w.sum(axis=0)[:, None, None] * np.diag(inv_sq)
        return hess

    def variance_gradient_batch(self, queries: np.ndarray) -> np.ndarray:
        """Gradients of the posterior variance, shape (Q, dim)."""
        queries = np.asarray(queries, dtype=float).reshape(-1, self.dim)
        if self.num_points == 0:
            return np.zeros_like(queries)
        kstar = se_kernel_matrix(self.inputs, queries, self.params)
        u = kstar * (self.gram_inverse @ kstar)
        s = u.sum(axis=0)
        t = u.T @ self.inputs
        return 2.0 * (queries * s[:, None] - t) / self.params.lengthscales**2


def fit(inputs: np.ndarray, targets: np.ndarray, params: KernelParams) -> GpModel:
    """Fit an exact GP to (inputs, targets) at fixed hyperparameters."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, params.dim)
    targets = np.asarray(targets, dtype=float).ravel()
    if inputs.shape[0] != targets.size:
        raise ValueError("inputs and targets disagree on the number of points")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise ValueError("training data must be finite")
    n = inputs.shape[0]
    if n == 0:
        empty = np.zeros((0, 0))
        return GpModel(params, inputs, targets, empty, np.zeros(0), empty)
    gram = _regularized_gram(inputs, params)
    factor, jitter = _chol_with_jitter(gram)
    alpha = cho_solve((factor, True), targets)
    gram_inverse = cho_solve((factor, True), np.eye(n))
    return GpModel(params, inputs, targets, factor, alpha, gram_inverse, jitter)


def log_marginal_likelihood(
    inputs: np.ndarray,
    targets: np.ndarray,
    params: KernelParams,
    with_gradient: bool = True,
):
    """Log marginal likelihood and its gradient in log-hyperparameter space.

    The gradient is ordered [log signal_variance, log lengthscales...,
    log noise_variance] to match ``KernelParams.to_log_vector``.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, params.dim)
    targets = np.asarray(targets, dtype=float).ravel()
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("log marginal likelihood needs at least one data point")
    gram = _regularized_gram(inputs, params)
    factor, _ = _chol_with_jitter(gram)
    alpha = cho_solve((factor, True), targets)
    lml = (
        -0.5 * float(targets @ alpha)
        - float(np.sum(np.log(np.diag(factor))))
        - 0.5 * n * math.log(2.0 * math.pi)
    )
    if not with_gradient:
        return lml
    kernel_part = se_kernel_matrix(inputs, inputs, params)
    gram_inverse = cho_solve((factor, True), np.eye(n))
    # d lml / d theta = 0.5 * sum(B * dK/dtheta) with B = alpha alpha^T - K^-1
    b = np.outer(alpha, alpha) - gram_inverse
    grad = np.empty(params.dim + 2)
    grad[0] = 0.5 * float(np.sum(b * kernel_part))
    scaled = inputs / params.lengthscales
    for i in range(params.dim):
        sq_i = (scaled[:, i][:, None] - scaled[:, i][None, :]) ** 2
        grad[1 + i] = 0.5 * float(np.sum(b * (kernel_part * sq_i)))
    grad[-1] = 0.5 * params.noise_variance * float(np.trace(b))
    return lml, grad


def _lml_value(inputs, targets, log_params) -> float:
    try:
        params = KernelParams.from_log_vector(log_params)
        return log_marginal_likelihood(inputs, targets, params, with_gradient=False)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError, OverflowError):
        return -np.inf


_LOG_BOUND = math.log(1e12)


def _ascend(inputs, targets, start_log, max_iter, fixed_mask, lower, upper):
    """Monotone Armijo gradient ascent on the LML, projected onto a log box."""
    theta = np.clip(np.asarray(start_log, dtype=float), lower, upper)
    value = _lml_value(inputs, targets, theta)
    if not np.isfinite(value):
        return theta, -np.inf
    step = 0.5
    for _ in range(max_iter):
        try:
            _, grad = log_marginal_likelihood(
                inputs, targets, KernelParams.from_log_vector(theta)
            )
        except np.linalg.LinAlgError:
            break
        grad[fixed_mask] = 0.0
        # drop gradient components pushing out of the box so the stopping
        # test sees only feasible ascent directions
        grad[(theta >= upper) & (grad > 0)] = 0.0
        grad[(theta <= lower) & (grad < 0)] = 0.0
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < 1e-7:
            break
        direction = grad / grad_norm
        slope = float(grad @ direction)
        trial_step = step
        accepted = False
        while trial_step >= 1e-12:
            candidate = np.clip(theta + trial_step * direction, lower, upper)
            trial_value = _lml_value(inputs, targets, candidate)
            if trial_value >= value + 1e-4 * trial_step * slope:
                improvement = trial_value - value
                theta, value = candidate, trial_value
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            break
        step = min(trial_step * 2.0, 2.0)
        if improvement < 1e-11 * max(1.0, abs(value)):
            break
    return theta, value


def _heuristic_start(inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Data-driven start: per-dimension spread lengthscales, target variance."""
    spread = np.std(inputs, axis=0)
    spread = np.where(spread > 1e-8, spread, 1.0)
    target_var = max(float(np.var(targets)), 1e-10)
    return np.log(np.concatenate(([target_var], spread, [1e-3 * target_var])))


def optimize_hyperparameters(
    inputs: np.ndarray,
    targets: np.ndarray,
    starts: int = 8,
    seed: int = 0,
    extra_starts: list[KernelParams] | None = None,
    fix_lengthscales: bool = False,
    max_iter: int = 150,
    lengthscale_bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> KernelParams:
    """Maximize the log marginal likelihood by multi-start gradient ascent.

    Runs `starts` ascents (one data-driven start plus random log-space
    perturbations of it), plus one per entry of `extra_starts`. The returned
    parameters achieve an LML at least as high as every start point; if no
    ascent improves on the best start, that start is returned with a warning.

    `lengthscale_bounds` optionally restricts the search to a (lower, upper)
    box on the lengthscales (broadcast over input dimensions). On smooth
    low-dimensional data the unconstrained optimum can push lengthscales far
    beyond the data span, which fits the mean well but leaves the posterior
    variance flat and uninformative; an upper bound near the data scale keeps
    the uncertainty estimates tied to training-data coverage.
    """
    if starts < 1:
        raise ValueError("starts must be a positive integer")
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2:
        raise ValueError("inputs must be a 2-d array")
    targets = np.asarray(targets, dtype=float).ravel()
    dim = inputs.shape[1]
    rng = np.random.default_rng(seed)

    lower = np.full(dim + 2, -_LOG_BOUND)
    upper = np.full(dim + 2, _LOG_BOUND)
    if lengthscale_bounds is not None:
        ls_low = np.broadcast_to(np.asarray(lengthscale_bounds[0], dtype=float), (dim,))
        ls_high = np.broadcast_to(np.asarray(lengthscale_bounds[1], dtype=float), (dim,))
        if np.any(ls_low <= 0.0) or np.any(ls_high < ls_low):
            raise ValueError("lengthscale bounds must satisfy 0 < lower <= upper")
        lower[1:-1] = np.log(ls_low)
        upper[1:-1] = np.log(ls_high)

    base = _heuristic_start(inputs, targets)
    start_list = [base]
    for _ in range(starts - 1):
        start_list.append(base + rng.uniform(-2.0, 2.0, size=base.size))
    for extra in extra_starts or []:
        if extra.dim != dim:
            raise ValueError("extra start dimension mismatch")
        start_list.append(extra.to_log_vector())
    start_list = [np.clip(s, lower, upper) for s in start_list]

    fixed_mask = np.zeros(dim + 2, dtype=bool)
    if fix_lengthscales:
        fixed_mask[1:-1] = True

    start_values = [_lml_value(inputs, targets, s) for s in start_list]
    best_theta, best_value = None, -np.inf
    for start in start_list:
        theta, value = _ascend(inputs, targets, start, max_iter, fixed_mask, lower, upper)
        if value > best_value:
            best_theta, best_value = theta, value
    finite_starts = [v for v in start_values if np.isfinite(v)]
    if best_theta is None or not np.isfinite(best_value):
        raise RuntimeError("no hyperparameter start produced a finite LML")
    if finite_starts and best_value < max(finite_starts):
        # ascent is monotone per start, so this can only mean numeric trouble
        warnings.warn("hyperparameter search failed to improve on its starts")
        best_theta = start_list[int(np.argmax(start_values))]
    return KernelParams.from_log_vector(best_theta)


def model_to_dict(model: GpModel) -> dict:
    """JSON-ready dictionary; the Gram factor is recomputed on load."""
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "gp-model",
        "signal_variance": model.params.signal_variance,
        "lengthscales": model.params.lengthscales.tolist(),
        "noise_variance": model.params.noise_variance,
        "inputs": model.inputs.tolist(),
        "targets": model.targets.tolist(),
    }


def model_from_dict(doc: dict) -> GpModel:
    if doc.get("kind") != "gp-model":
        raise ValueError("not a gp-model document")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')}")
    params = KernelParams(
        signal_variance=float(doc["signal_variance"]),
        lengthscales=np.asarray(doc["lengthscales"], dtype=float),
        noise_variance=float(doc["noise_variance"]),
    )
    inputs = np.asarray(doc["inputs"], dtype=float).reshape(-1, params.dim)
    return fit(inputs, np.asarray(doc["targets"], dtype=float), params)


def save_model(model: GpModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> GpModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
