"""
Simulation plants standing in for the irradiated eye.

A plant exposes only step / measure / truth. Its state and true alpha stay
private; the harness reads ``truth`` for the trace and nothing else.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import RunAbortedError
from .mor import ReducedModel
from .physical_model import FullOrderModel
from .utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class PlantOutputs:
    y_vol: float
    y_peak: float


class Plant:
    """Common measurement and bookkeeping; subclasses implement the dynamics."""

    def __init__(self, dt: float, noise_std: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.dt = dt
        self._noise_std = noise_std
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def _advance(self, u: float) -> None:
        raise NotImplementedError

    def _outputs(self) -> PlantOutputs:
        raise NotImplementedError

    def step(self, u: float) -> None:
        """Apply power u (W) for one sample period."""
        self._advance(u)
        out = self._outputs()
        if not (np.isfinite(out.y_vol) and np.isfinite(out.y_peak)):
            raise RunAbortedError(f"plant produced non-finite outputs after u={u}")

    def measure(self) -> float:
        """Noisy volume temperature (K)."""
        noise = self._rng.normal(0.0, self._noise_std) if self._noise_std > 0 else 0.0
        return self._outputs().y_vol + noise

    def truth(self) -> PlantOutputs:
        return self._outputs()


class FullOrderPlant(Plant):
    """Full finite-difference model at the true alpha."""

    def __init__(self, model: FullOrderModel, alpha_true: float, dt: float, noise_std: float = 0.0, rng=None):
        super().__init__(dt, noise_std, rng)
        self._model = model.with_alpha(alpha_true)
        self._model.factorize(dt)
        self._x = np.zeros(self._model.n)

    def _advance(self, u: float) -> None:
        self._x = self._model.step(self._x, u, self.dt)

    def _outputs(self) -> PlantOutputs:
        return PlantOutputs(self._model.y_vol(self._x), self._model.y_peak(self._x))


class ReducedPlant(Plant):
    """Reduced model at the true alpha: parameter mismatch without model mismatch."""

    def __init__(self, model: ReducedModel, alpha_true: float, noise_std: float = 0.0, rng=None):
        super().__init__(model.dt, noise_std, rng)
        self._model = model
        self._b = model.b(alpha_true)
        self._c_vol = model.c_vol(alpha_true)
        self._x = np.zeros(model.rank)

    def _advance(self, u: float) -> None:
        self._x = self._model.a_d @ self._x + self._b * u

    def _outputs(self) -> PlantOutputs:
        return PlantOutputs(float(self._c_vol @ self._x), float(self._model.c_peak_r @ self._x))
