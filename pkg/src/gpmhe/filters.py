"""Recursive baseline estimators sharing the learned-dynamics interface.

Extended and unscented Kalman filters driven by GP posterior means (their
one-step variances widen the predicted and innovation covariances), plus
window estimators on a trusted model: fixed weights throughout, or with a
prior weight that follows a Kalman covariance recursion.
"""

from dataclasses import dataclass, replace

import warnings

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from gpmhe import mhe
from gpmhe.mhe import MheConfig, MheSolution, MovingHorizonEstimator
from gpmhe.propagation import NoiseConfig

_COV_FLOOR = 1e-12
_INNOVATION_BUMP = 1e-10
_SQRT_JITTER_START = 1e-10
_SQRT_JITTER_MAX = 1e-6


@dataclass
class FilterState:
    """Gaussian belief over the state: mean and symmetric PD covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        n = self.mean.size
        if cov.shape != (n, n):
            raise ValueError("covariance must be square and match the mean")
        cov = 0.5 * (cov + cov.T)
        evals, evecs = np.linalg.eigh(cov)
        if evals[0] < _COV_FLOOR:
            evals = np.maximum(evals, _COV_FLOOR)
            cov = (evecs * evals) @ evecs.T
            cov = 0.5 * (cov + cov.T)
        self.covariance = cov


@dataclass
class UtParams:
    """Unscented-transform scaling parameters."""

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def weights(self, n: int) -> tuple[float, np.ndarray, np.ndarray]:
        """Sigma-point spread n + lambda and mean/covariance weights."""
        lam = self.alpha ** 2 * (n + self.kappa) - n
        if lam <= -n:
            raise ValueError("sigma-point scaling must satisfy lambda > -n")
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + 1.0 - self.alpha ** 2 + self.beta
        return n + lam, wm, wc


def _innovation_solve(s_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve S X = rhs, bumping the diagonal if S is numerically singular."""
    try:
        return cho_solve(cho_factor(s_mat, lower=True), rhs)
    except np.linalg.LinAlgError:
        warnings.warn("singular innovation covariance; regularizing",
                      RuntimeWarning, stacklevel=3)
        bumped = s_mat + _INNOVATION_BUMP * np.eye(s_mat.shape[0])
        return cho_solve(cho_factor(bumped, lower=True), rhs)


def _sigma_points(mean: np.ndarray, cov: np.ndarray,
                  spread: float) -> np.ndarray:
    """2n+1 points matching (mean, cov) under the UT weights, rows stacked."""
    scaled = spread * cov
    jitter = 0.0
    while True:
        try:
            root = np.linalg.cholesky(scaled + jitter * np.eye(mean.size))
            break
        except np.linalg.LinAlgError:
            jitter = _SQRT_JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > _SQRT_JITTER_MAX:
                raise np.linalg.LinAlgError(
                    "sigma-point covariance square root failed even with "
                    f"jitter {_SQRT_JITTER_MAX:g}") from None
    return np.vstack([mean, mean + root.T, mean - root.T])


def gp_ekf_step(state: FilterState, u, y, model,
                noise: NoiseConfig) -> FilterState:
    """One predict/update cycle of an extended Kalman filter.

    Predicts through the model mean with the Jacobian at the current mean,
    adding the process noise and the model's one-step state covariance; the
    measurement update linearizes the output map at the predicted mean and
    adds the one-step output covariance there. Joseph form keeps the
    posterior covariance symmetric.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    a_jac, _ = model.jacobians(state.mean, u)
    var_x, _ = model.one_step_variances(state.mean, u)
    mean_pred = model.mean_f(state.mean, u)
    cov_pred = a_jac @ state.covariance @ a_jac.T + noise.sigma_w + var_x
    _, c_jac = model.jacobians(mean_pred, u)
    _, var_y = model.one_step_variances(mean_pred, u)
    meas_cov = noise.sigma_v + var_y
    s_mat = c_jac @ cov_pred @ c_jac.T + meas_cov
    gain = _innovation_solve(s_mat, c_jac @ cov_pred).T
    mean_new = mean_pred + gain @ (y - model.mean_h(mean_pred, u))
    ikc = np.eye(mean_pred.size) - gain @ c_jac
    cov_new = ikc @ cov_pred @ ikc.T + gain @ meas_cov @ gain.T
    return FilterState(mean_new, cov_new)


def gp_ukf_step(state: FilterState, u, y, model, noise: NoiseConfig,
                ut: UtParams | None = None) -> FilterState:
    """One sigma-point predict/update cycle.

    Sigma points are redrawn around the predicted belief before the output
    update so the measurement sees the full predicted covariance. The model's
    one-step covariances are evaluated once at the respective means, not per
    sigma point.
    """
    if ut is None:
        ut = UtParams()
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    spread, wm, wc = ut.weights(state.mean.size)
    pts = _sigma_points(state.mean, state.covariance, spread)
    prop = np.stack([model.mean_f(pt, u) for pt in pts])
    mean_pred = wm @ prop
    dx = prop - mean_pred
    var_x, _ = model.one_step_variances(state.mean, u)
    cov_pred = (dx.T * wc) @ dx + noise.sigma_w + var_x
    cov_pred = 0.5 * (cov_pred + cov_pred.T)
    pts = _sigma_points(mean_pred, cov_pred, spread)
    outs = np.stack([model.mean_h(pt, u) for pt in pts])
    y_pred = wm @ outs
    dy = outs - y_pred
    _, var_y = model.one_step_variances(mean_pred, u)
    s_mat = (dy.T * wc) @ dy + noise.sigma_v + var_y
    cross = ((pts - mean_pred).T * wc) @ dy
    gain = _innovation_solve(s_mat, cross.T).T
    mean_new = mean_pred + gain @ (y - y_pred)
    cov_new = cov_pred - gain @ s_mat @ gain.T
    return FilterState(mean_new, cov_new)


class _FilterEstimator:
    """Stateful wrapper giving the filters the estimator interface.

    `step(u_prev, y)` consumes the measurement taken at the new time, so
    `estimate` is the filtered state there. Window estimators instead see
    data only up to the previous sample; the harness feeds each kind the
    measurement its convention expects.
    """

    uses_current_measurement = True

    def __init__(self, model, noise: NoiseConfig, x0_hat, prior_cov):
        if noise.sigma_w.shape[0] != model.n \
                or noise.sigma_v.shape[0] != model.p:
            raise ValueError("model and noise dimensions disagree")
        self.model = model
        self.noise = noise
        self._init_cov = np.asarray(prior_cov, dtype=float).copy()
        self.reset(x0_hat)

    def reset(self, x0_hat) -> None:
        self.state = FilterState(np.asarray(x0_hat, dtype=float),
                                 self._init_cov.copy())
        self.t = 0

    @property
    def estimate(self) -> np.ndarray:
        return self.state.mean

    @property
    def current_cov(self) -> np.ndarray:
        return self.state.covariance

    def step(self, u_prev, y) -> FilterState:
        self.state = self._advance(u_prev, y)
        self.t += 1
        return self.state


class GpEkf(_FilterEstimator):
    """Extended Kalman filter on the (learned or exact) model."""

    def _advance(self, u, y) -> FilterState:
        return gp_ekf_step(self.state, u, y, self.model, self.noise)


class GpUkf(_FilterEstimator):
    """Unscented Kalman filter on the (learned or exact) model."""

    def __init__(self, model, noise: NoiseConfig, x0_hat, prior_cov,
                 ut: UtParams | None = None):
        self.ut = ut if ut is not None else UtParams()
        super().__init__(model, noise, x0_hat, prior_cov)

    def _advance(self, u, y) -> FilterState:
        return gp_ukf_step(self.state, u, y, self.model, self.noise, self.ut)


def model_mhe_solve(window: mhe.MheWindow, model, config: MheConfig,
                    z0: np.ndarray | None = None) -> MheSolution:
    """Solve one window on a trusted model with fixed weighting matrices.

    The stage weights are the inverses of the configured process and output
    noise covariances and the prior weight comes from the window, so any
    model uncertainty terms are ignored.
    """
    if config.cost_mode != "constant":
        config = replace(config, cost_mode="constant")
    return mhe.solve(window, model, config, z0)


def gp_mhe_variant(model, config: MheConfig, x0_hat,
                   cost_mode: str) -> MovingHorizonEstimator:
    """Window estimator with the stage weights built per `cost_mode`."""
    if config.cost_mode != cost_mode:
        config = replace(config, cost_mode=cost_mode)
    return MovingHorizonEstimator(model, config, x0_hat)


class EkfPriorMhe(MovingHorizonEstimator):
    """Fixed-weight window estimator whose prior weight tracks a Kalman
    covariance.

    The stage weights stay at the configured noise covariances; the
    covariance weighting each window's first state follows an extended
    Kalman recursion linearized along the estimated trajectory, so the prior
    term tightens as the estimates settle instead of staying at its initial
    value.
    """

    def __init__(self, model, config: MheConfig, x0_hat):
        if config.cost_mode != "constant":
            config = replace(config, cost_mode="constant")
        super().__init__(model, config, x0_hat)

    def reset(self, x0_hat) -> None:
        super().reset(x0_hat)
        self._ricc = self.config.prior_cov_init.copy()

    def _carried_cov(self, solution: MheSolution) -> np.ndarray:
        # measurement update at the previous estimate (the state the newest
        # output corrects), then prediction through the window's corrected
        # version of that state
        u, _ = self.data[-1]
        _, c_jac = self.model.jacobians(self.estimate, u)
        a_jac, _ = self.model.jacobians(solution.states[-2], u)
        cov = self._ricc
        s_mat = c_jac @ cov @ c_jac.T + self.config.noise.sigma_v
        gain = _innovation_solve(s_mat, c_jac @ cov).T
        ikc = np.eye(self.config.n) - gain @ c_jac
        upd = ikc @ cov @ ikc.T + gain @ self.config.noise.sigma_v @ gain.T
        self._ricc = a_jac @ upd @ a_jac.T + self.config.noise.sigma_w
        return self._ricc
