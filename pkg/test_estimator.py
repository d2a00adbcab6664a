"""
Joint state/parameter EKF on the reduced model.

 Group 1: Prediction
   1.  zero input keeps a zero state and inflates the alpha variance by q_alpha
   2.  the alpha column of the transition Jacobian is db/dalpha * u

 Group 2: Update
   3.  measurement Jacobian agrees with finite differences
   4.  zero innovation leaves the estimate unchanged and shrinks P
   5.  covariance stays symmetric positive semidefinite
   6.  alpha is clamped and the clamp is reported
   7.  non-positive innovation variance raises NumericalError

 Group 3: Convergence
   8.  noise-free closed loop at 1 kHz identifies alpha within 100 steps
   9.  exact model and exact alpha give zero innovation at 1 kHz
"""
import numpy as np
import pytest

from src.config import EkfConfig
from src.estimator import (
    EkfState,
    ExtendedKalmanFilter,
    ekf_predict,
    ekf_update,
    initial_state,
    measurement_jacobian,
    process_noise,
)
from src.exceptions import NumericalError
from src.harness import run_closed_loop
from src.plant import ReducedPlant


CONFIG = EkfConfig()


def _heated_state(model, alpha, p_alpha=0.25, u=0.05):
    x = np.linalg.solve(np.eye(model.rank) - model.a_d, model.b(alpha) * u)
    p = np.diag(np.r_[np.full(model.rank, CONFIG.p0_state), p_alpha])
    return EkfState(x_hat=x, alpha_hat=alpha, p_cov=p)


# ── Group 1: Prediction ───────────────────────────────────────────────────────

def test_zero_input_prediction(rom_250):
    state = initial_state(CONFIG, rom_250.rank)
    q = process_noise(CONFIG, rom_250.rank)
    nxt = ekf_predict(state, 0.0, rom_250, q)
    assert np.all(nxt.x_hat == 0.0)
    assert nxt.alpha_hat == state.alpha_hat
    r = rom_250.rank
    assert nxt.p_cov[r, r] == pytest.approx(state.p_cov[r, r] + CONFIG.q_alpha, rel=1e-12)
    np.testing.assert_array_equal(nxt.p_cov[:r, r], 0.0)


def test_transition_jacobian_alpha_column(rom_250):
    r, alpha, u = rom_250.rank, 0.9, 0.04
    p = np.zeros((r + 1, r + 1))
    p[r, r] = 1.0
    state = EkfState(x_hat=np.zeros(r), alpha_hat=alpha, p_cov=p)
    nxt = ekf_predict(state, u, rom_250, np.zeros((r + 1, r + 1)))
    h = 1e-6 * alpha
    fd = (rom_250.step(np.zeros(r), u, alpha + h) - rom_250.step(np.zeros(r), u, alpha - h)) / (2 * h)
    np.testing.assert_allclose(nxt.p_cov[:r, r], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


# ── Group 2: Update ───────────────────────────────────────────────────────────

@pytest.mark.parametrize("alpha", [0.5, 1.1])
def test_measurement_jacobian(rom_250, alpha):
    state = _heated_state(rom_250, alpha)
    h = measurement_jacobian(state, rom_250)
    np.testing.assert_array_equal(h[:-1], rom_250.c_vol(alpha))
    step = 1e-6 * alpha
    fd = (rom_250.c_vol(alpha + step) @ state.x_hat - rom_250.c_vol(alpha - step) @ state.x_hat) / (2 * step)
    assert h[-1] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_zero_innovation_keeps_estimate(rom_250):
    state = _heated_state(rom_250, 0.9)
    y = float(rom_250.c_vol(0.9) @ state.x_hat)
    nxt = ekf_update(state, y, rom_250, CONFIG.r_meas, CONFIG.clamp)
    assert nxt.innovation == 0.0
    np.testing.assert_array_equal(nxt.x_hat, state.x_hat)
    assert nxt.alpha_hat == state.alpha_hat
    assert np.trace(nxt.p_cov) < np.trace(state.p_cov)
    assert not nxt.alpha_clamped


def test_covariance_stays_psd(rom_250):
    ekf = ExtendedKalmanFilter(rom_250, CONFIG)
    rng = np.random.default_rng(4)
    for _ in range(100):
        ekf.predict(float(rng.uniform(0.0, 0.1)))
        ekf.update(float(rng.normal(5.0, 2.0)))
        p = ekf.state.p_cov
        np.testing.assert_array_equal(p, p.T)
        assert np.linalg.eigvalsh(p).min() >= -1e-12 * np.abs(p).max()
        lo, hi = CONFIG.clamp
        assert lo <= ekf.alpha_hat <= hi
    assert ekf.peak_estimate() == pytest.approx(float(rom_250.c_peak_r @ ekf.x_hat), rel=1e-15)


def test_alpha_clamped_on_large_innovation(rom_250):
    hi = CONFIG.clamp[1]
    state = _heated_state(rom_250, 1.99, p_alpha=1.0)
    h = measurement_jacobian(state, rom_250)
    assert h[-1] != 0.0
    y = float(rom_250.c_vol(1.99) @ state.x_hat) + np.sign(h[-1]) * 1e4
    nxt = ekf_update(state, y, rom_250, CONFIG.r_meas, CONFIG.clamp)
    assert nxt.alpha_clamped
    assert nxt.alpha_hat == hi


def test_nonpositive_innovation_variance(rom_250):
    state = _heated_state(rom_250, 0.9)
    state = EkfState(x_hat=state.x_hat, alpha_hat=0.9, p_cov=-1e6 * np.eye(state.dim))
    with pytest.raises(NumericalError):
        ekf_update(state, 1.0, rom_250, CONFIG.r_meas, CONFIG.clamp)


# ── Group 3: Convergence ──────────────────────────────────────────────────────

@pytest.mark.parametrize("alpha_true", [0.5, 1.1])
def test_identifies_alpha_in_closed_loop_at_1khz(sim_1k, rom_1k, alpha_true):
    sim = sim_1k.with_overrides(
        {
            "scenario.plant": "reduced",
            "scenario.noise_std_K": 0.0,
            "scenario.alpha_true": alpha_true,
            "scenario.alpha_init": 0.7363,
            "scenario.horizon": 2,
            "scenario.duration_s": 0.1,
        }
    )
    trace = run_closed_loop(sim, reduced=rom_1k)
    assert len(trace) == 100
    assert abs(trace.rows[-1].alpha_hat - alpha_true) < 0.02


def test_exact_model_gives_zero_innovation_at_1khz(rom_1k):
    alpha = 0.7363
    config = EkfConfig(q_state=0.0, q_alpha=0.0)
    plant = ReducedPlant(rom_1k, alpha_true=alpha, noise_std=0.0)
    ekf = ExtendedKalmanFilter(rom_1k, config, alpha0=alpha)
    u = np.r_[np.full(50, 0.1), np.linspace(0.1, 0.0, 50)]
    for power in u:
        plant.step(power)
        ekf.predict(power)
        state = ekf.update(plant.measure())
        scale = max(1.0, abs(plant.truth().y_vol))
        assert abs(state.innovation) <= 1e-12 * scale
    assert ekf.alpha_hat == pytest.approx(alpha, abs=1e-12)
    assert ekf.peak_estimate() == pytest.approx(plant.truth().y_peak, rel=1e-12)
