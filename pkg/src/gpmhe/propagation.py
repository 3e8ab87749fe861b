"""Trajectory-dependent uncertainty recursion with PSD-order capping.

The state weight at a window point is noise + one-step GP variance +
linearized carry-over of the previous state weight, clipped at a fixed cap in
the positive semidefinite order. The output weight consumes the previous
state weight the same way. Capping uses either the exact PSD comparison or a
cheap Gershgorin eigenvalue bound that caps at least as often.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-12


def _check_symmetric(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if mat.size and np.max(np.abs(mat - mat.T)) > SYMMETRY_TOL:
        raise ValueError(f"{name} is not symmetric within {SYMMETRY_TOL:g}")
    return mat


def _check_diagonal_pd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = _check_symmetric(mat, name)
    if np.max(np.abs(mat - np.diag(np.diag(mat))), initial=0.0) > SYMMETRY_TOL:
        raise ValueError(f"{name} must be diagonal")
    if mat.size and np.min(np.diag(mat)) <= 0:
        raise ValueError(f"{name} must have a positive diagonal")
    return mat


@dataclass
class NoiseConfig:
    """Diagonal process and measurement noise covariances."""

    sigma_w: np.ndarray
    sigma_v: np.ndarray

    def __post_init__(self):
        self.sigma_w = _check_diagonal_pd(np.atleast_2d(self.sigma_w), "sigma_w")
        self.sigma_v = _check_diagonal_pd(np.atleast_2d(self.sigma_v), "sigma_v")

    @staticmethod
    def from_variances(w_var, v_var) -> "NoiseConfig":
        return NoiseConfig(np.diag(np.atleast_1d(w_var)),
                           np.diag(np.atleast_1d(v_var)))


@dataclass
class UncertaintyCaps:
    """PSD caps and floors for the propagated weights.

    The floors default to the noise covariances; `epsilon` regularizes the
    inverse of sigma_x_max where the theory needs it strictly positive
    definite. `disable_cap` switches the recursion to pure propagation.
    """

    sigma_x_max: np.ndarray
    sigma_y_max: np.ndarray
    sigma_x_min: np.ndarray
    sigma_y_min: np.ndarray
    epsilon: float = 0.0
    disable_cap: bool = False

    def __post_init__(self):
        self.sigma_x_max = _check_symmetric(np.atleast_2d(self.sigma_x_max),
                                            "sigma_x_max")
        self.sigma_y_max = _check_symmetric(np.atleast_2d(self.sigma_y_max),
                                            "sigma_y_max")
        self.sigma_x_min = _check_symmetric(np.atleast_2d(self.sigma_x_min),
                                            "sigma_x_min")
        self.sigma_y_min = _check_symmetric(np.atleast_2d(self.sigma_y_min),
                                            "sigma_y_min")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @staticmethod
    def from_noise(noise: NoiseConfig, sigma_x_max, sigma_y_max,
                   epsilon: float = 0.0, disable_cap: bool = False) -> "UncertaintyCaps":
        return UncertaintyCaps(
            sigma_x_max=np.atleast_2d(sigma_x_max),
            sigma_y_max=np.atleast_2d(sigma_y_max),
            sigma_x_min=noise.sigma_w.copy(),
            sigma_y_min=noise.sigma_v.copy(),
            epsilon=epsilon,
            disable_cap=disable_cap,
        )


def psd_min(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return `a` if a - b is negative semidefinite, else `b`.

    This is the exact PSD-order minimum used for capping: the candidate is
    kept only when it is dominated by the cap.
    """
    a = _check_symmetric(a, "a")
    b = _check_symmetric(b, "b")
    if a.shape != b.shape:
        raise ValueError("psd_min arguments must have equal shapes")
    diff = a - b
    if float(np.max(np.linalg.eigvalsh(0.5 * (diff + diff.T)))) <= PSD_TOL:
        return a
    return b


def _cap_lambda_min(cap: np.ndarray) -> float:
    off = np.max(np.abs(cap - np.diag(np.diag(cap))), initial=0.0)
    if off <= SYMMETRY_TOL:
        return float(np.min(np.diag(cap)))
    return float(np.min(np.linalg.eigvalsh(cap)))


def psd_min_gershgorin(candidate: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Cheap surrogate for ``psd_min`` against a diagonal cap.

    Keeps the candidate only when its Gershgorin upper bound on the largest
    eigenvalue stays below the smallest eigenvalue of the cap, so it returns
    the cap at least as often as the exact comparison does.
    """
    candidate = _check_symmetric(candidate, "candidate")
    cap = _check_symmetric(cap, "cap")
    if candidate.shape != cap.shape:
        raise ValueError("arguments must have equal shapes")
    abs_rows = np.sum(np.abs(candidate), axis=1) - np.abs(np.diag(candidate))
    upper = float(np.max(np.diag(candidate) + abs_rows))
    if upper <= _cap_lambda_min(cap) + PSD_TOL:
        return candidate
    return cap


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _capped(candidate: np.ndarray, cap: np.ndarray, disable_cap: bool,
            use_gershgorin: bool) -> np.ndarray:
    candidate = _symmetrize(candidate)
    if disable_cap:
        return candidate
    if use_gershgorin:
        return psd_min_gershgorin(candidate, cap)
    return psd_min(candidate, cap)


def propagate_x(sigma_prev, sigma_x_os, a_jac, noise: NoiseConfig,
                caps: UncertaintyCaps, use_gershgorin: bool = False) -> np.ndarray:
    """One state-weight step: noise + one-step variance + linearized carry."""
    a_jac = np.asarray(a_jac, dtype=float)
    candidate = noise.sigma_w + np.asarray(sigma_x_os, dtype=float) \
        + a_jac @ np.asarray(sigma_prev, dtype=float) @ a_jac.T
    return _capped(candidate, caps.sigma_x_max, caps.disable_cap, use_gershgorin)


def propagate_y(sigma_prev_x, sigma_y_os, c_jac, noise: NoiseConfig,
                caps: UncertaintyCaps, use_gershgorin: bool = False) -> np.ndarray:
    """Output-weight step; consumes the previous state weight."""
    c_jac = np.asarray(c_jac, dtype=float)
    candidate = noise.sigma_v + np.asarray(sigma_y_os, dtype=float) \
        + c_jac @ np.asarray(sigma_prev_x, dtype=float) @ c_jac.T
    return _capped(candidate, caps.sigma_y_max, caps.disable_cap, use_gershgorin)


@dataclass
class PropagatedUncertainty:
    """Weight sequences along a window plus the carried-forward state weight."""

    sigma_x_seq: list = field(default_factory=list)
    sigma_y_seq: list = field(default_factory=list)
    prior_sigma: np.ndarray | None = None


def propagate_window(model, states, inputs=None, noise: NoiseConfig = None,
                     caps: UncertaintyCaps = None, sigma_init=None,
                     use_gershgorin: bool = False, ev=None) -> PropagatedUncertainty:
    """Run the weight recursion along a window of regression inputs.

    `states`/`inputs` are the window trajectory (Q points). The recursion
    starts from `sigma_init` (zero when omitted: the first window point is
    not reached by propagation). `prior_sigma` is the final state weight,
    which is what the estimate produced from this window carries to the time
    it becomes a prior.
    """
    states = np.asarray(states, dtype=float).reshape(-1, model.n)
    q = states.shape[0]
    n = model.n
    sigma = (np.zeros((n, n)) if sigma_init is None
             else _check_symmetric(np.asarray(sigma_init, dtype=float), "sigma_init"))
    result = PropagatedUncertainty(prior_sigma=sigma)
    if q == 0:
        return result
    if ev is None:
        ev = model.eval_window(states, inputs)
    for k in range(q):
        sigma_x = propagate_x(sigma, np.diag(ev.var_x[k]), ev.jac_f[k],
                              noise, caps, use_gershgorin)
        sigma_y = propagate_y(sigma, np.diag(ev.var_y[k]), ev.jac_h[k],
                              noise, caps, use_gershgorin)
        result.sigma_x_seq.append(sigma_x)
        result.sigma_y_seq.append(sigma_y)
        sigma = sigma_x
    result.prior_sigma = sigma
    return result
