"""
Extended Kalman filter on the extended state (x, alpha).

alpha has constant dynamics; it enters the prediction through b(alpha) and
the measurement through c_vol(alpha), so both Jacobians carry an alpha column.
"""
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .config import EkfConfig
from .exceptions import NumericalError
from .mor import ReducedModel
from .utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class EkfState:
    """Joint estimate with covariance over (x, alpha)."""
    x_hat: np.ndarray
    alpha_hat: float
    p_cov: np.ndarray
    innovation: float = 0.0
    alpha_clamped: bool = False

    @property
    def dim(self) -> int:
        return len(self.x_hat) + 1


def process_noise(config: EkfConfig, rank: int) -> np.ndarray:
    return np.diag(np.r_[np.full(rank, config.q_state), config.q_alpha])


def initial_state(config: EkfConfig, rank: int, alpha0: Optional[float] = None) -> EkfState:
    """Zero temperature, alpha0 and the diagonal prior covariance."""
    return EkfState(
        x_hat=np.zeros(rank),
        alpha_hat=float(config.alpha0 if alpha0 is None else alpha0),
        p_cov=np.diag(np.r_[np.full(rank, config.p0_state), config.p0_alpha]),
    )


def ekf_predict(state: EkfState, u: float, model: ReducedModel, q_proc: np.ndarray) -> EkfState:
    """x+ = a_d x + b(alpha) u, alpha+ = alpha; P+ = F P F^T + Q."""
    r = model.rank
    db, _ = model.derivatives(state.alpha_hat)
    f = np.zeros((r + 1, r + 1))
    f[:r, :r] = model.a_d
    f[:r, r] = db * u
    f[r, r] = 1.0
    x_next = model.a_d @ state.x_hat + model.b(state.alpha_hat) * u
    p_next = f @ state.p_cov @ f.T + q_proc
    return replace(state, x_hat=x_next, p_cov=0.5 * (p_next + p_next.T))


def measurement_jacobian(state: EkfState, model: ReducedModel) -> np.ndarray:
    """H = [c_vol(alpha), dc_vol/dalpha . x]."""
    _, dc = model.derivatives(state.alpha_hat)
    return np.r_[model.c_vol(state.alpha_hat), dc @ state.x_hat]


def ekf_update(
    state: EkfState, y_meas: float, model: ReducedModel, r_meas: float, clamp: Tuple[float, float]
) -> EkfState:
    """Measurement update in Joseph form, then alpha clamping."""
    h = measurement_jacobian(state, model)
    innovation = float(y_meas - model.c_vol(state.alpha_hat) @ state.x_hat)
    ph = state.p_cov @ h
    s = float(h @ ph + r_meas)
    if not s > 0:
        raise NumericalError(f"innovation variance is not positive: {s}")
    gain = ph / s
    correction = gain * innovation
    i_kh = np.eye(state.dim) - np.outer(gain, h)
    p_next = i_kh @ state.p_cov @ i_kh.T + r_meas * np.outer(gain, gain)

    alpha = state.alpha_hat + correction[-1]
    lo, hi = clamp
    clamped = not lo <= alpha <= hi
    if clamped:
        logger.warning(f"alpha estimate {alpha:.4f} clamped to [{lo}, {hi}]")
        alpha = min(max(alpha, lo), hi)
    return EkfState(
        x_hat=state.x_hat + correction[:-1],
        alpha_hat=float(alpha),
        p_cov=0.5 * (p_next + p_next.T),
        innovation=innovation,
        alpha_clamped=clamped,
    )


class ExtendedKalmanFilter:
    """Stateful wrapper used by the closed loop; sees only the reduced model and measurements."""

    def __init__(self, model: ReducedModel, config: EkfConfig, alpha0: Optional[float] = None):
        self.model = model
        self.config = config
        self.q_proc = process_noise(config, model.rank)
        self.state = initial_state(config, model.rank, alpha0)

    @property
    def x_hat(self) -> np.ndarray:
        return self.state.x_hat

    @property
    def alpha_hat(self) -> float:
        return self.state.alpha_hat

    def predict(self, u: float) -> EkfState:
        self.state = ekf_predict(self.state, u, self.model, self.q_proc)
        return self.state

    def update(self, y_meas: float) -> EkfState:
        self.state = ekf_update(self.state, y_meas, self.model, self.config.r_meas, self.config.clamp)
        return self.state

    def peak_estimate(self) -> float:
        return float(self.model.c_peak_r @ self.state.x_hat)
