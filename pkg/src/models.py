"""
Domain value types for the retinal laser MPC toolkit.
"""
from enum import Enum
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .exceptions import ConfigurationError, OcpSpecError


class VolWeightSign(str, Enum):
    """Sign of the optical-depth exponent in the volume-temperature weights."""
    PLUS = "+"
    MINUS = "-"

    @property
    def factor(self) -> float:
        return 1.0 if self is VolWeightSign.PLUS else -1.0


class SourceQuadrature(str, Enum):
    """How depth/radial profiles are sampled onto the grid."""
    CELL = "cell"
    POINT = "point"


class RadialExtent(str, Enum):
    """Radial range of the x_mean average."""
    FULL = "full"
    INNER = "inner"


class PlantKind(str, Enum):
    """Simulation plant."""
    FULL = "full"
    REDUCED = "reduced"


class QpStatus(str, Enum):
    """QP solver status."""
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


class R0Schedule(str, Enum):
    """State-cost switch R0(n)."""
    ONE = "one"
    CHI3 = "chi3"

    def weight(self, n: int) -> float:
        if self is R0Schedule.CHI3 and n in (1, 2, 3):
            return 0.0
        return 1.0


class CostPresetName(str, Enum):
    """Shipped cost configurations."""
    A = "a"
    B = "b"
    C = "c"
    D = "d"
    KHZ = "kHz"
    EXP = "exp"
    CUSTOM = "custom"


class TraceFlag(str, Enum):
    """Per-step annotations written to the trace."""
    CONSTRAINT_ACTIVE = "constraint_active"
    INPUT_SATURATED = "u_max_active"
    FALLBACK = "fallback"
    LASER_OFF = "laser_off"
    MAX_ITER = "max_iter"
    ALPHA_CLAMPED = "alpha_clamped"
    PROBE = "probe"
    DEADLINE_MISS = "deadline_miss"


class MaterialConstants(BaseModel):
    """Thermal properties of water, the main tissue component."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = Field(default=993.0, gt=0, description="density (kg/m^3)")
    cp: float = Field(default=4176.0, gt=0, description="heat capacity (J/(kg K))")
    k: float = Field(default=0.627, gt=0, description="thermal conductivity (W/(m K))")

    @property
    def volumetric_heat_capacity(self) -> float:
        return self.rho * self.cp

    @property
    def diffusivity(self) -> float:
        return self.k / (self.rho * self.cp)


class Geometry(BaseModel):
    """Axisymmetric computational domain with five depth layers.

    Layers in order: pre-retinal, neural retina, RPE, choroid, sclera.
    Relational invariants are checked by :meth:`check` so that a bad layout
    surfaces as a ``ConfigurationError`` at grid construction.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    r_outer: float = Field(default=1.0e-3, gt=0)
    r_inner: float = Field(default=1.0e-4, gt=0)
    layer_bounds: Tuple[float, ...] = (0.0, 3.0e-4, 5.0e-4, 5.1e-4, 7.6e-4, 1.2e-3)
    rpe_layer: int = 2
    choroid_layer: int = 3
    z_center: float = 5.05e-4
    z_b: float = 5.0e-4
    z_e: float = 7.6e-4

    @property
    def depth(self) -> float:
        return self.layer_bounds[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_bounds) - 1

    @property
    def rpe_interval(self) -> Tuple[float, float]:
        return self.layer_bounds[self.rpe_layer], self.layer_bounds[self.rpe_layer + 1]

    @property
    def choroid_interval(self) -> Tuple[float, float]:
        return self.layer_bounds[self.choroid_layer], self.layer_bounds[self.choroid_layer + 1]

    def check(self) -> "Geometry":
        """Raise ConfigurationError unless the layout invariants hold."""
        if not 0 < self.r_inner < self.r_outer:
            raise ConfigurationError(
                f"need 0 < r_inner < r_outer, got r_inner={self.r_inner}, r_outer={self.r_outer}"
            )
        bounds = list(self.layer_bounds)
        if len(bounds) < 3 or any(b1 <= b0 for b0, b1 in zip(bounds, bounds[1:])):
            raise ConfigurationError(f"layer bounds must be strictly increasing: {bounds}")
        if bounds[0] != 0.0:
            raise ConfigurationError("layer bounds must start at depth 0")
        for name, idx in (("rpe_layer", self.rpe_layer), ("choroid_layer", self.choroid_layer)):
            if not 0 <= idx < self.n_layers:
                raise ConfigurationError(f"{name}={idx} is not a layer index")
        lo, hi = self.rpe_interval
        if not lo < self.z_center < hi:
            raise ConfigurationError(f"z_center={self.z_center} outside the RPE interval [{lo}, {hi}]")
        if not self.z_b < self.z_e:
            raise ConfigurationError(f"need z_b < z_e, got {self.z_b} >= {self.z_e}")
        absorbing = [*self.rpe_interval, *self.choroid_interval]
        if self.z_b > min(absorbing) or self.z_e < max(absorbing):
            raise ConfigurationError("[z_b, z_e] must cover the RPE and choroid layers")
        if self.z_e > self.depth:
            raise ConfigurationError("z_e lies below the domain")
        return self


class AbsorptionProfile(BaseModel):
    """Piecewise-constant absorption mu(z) parameterised by the RPE factor alpha."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = 0.7363
    mu_rpe_ref: float = Field(default=120400.0, ge=0)
    mu_choroid: float = Field(default=2662.2, ge=0)

    @property
    def mu_rpe(self) -> float:
        return self.alpha * self.mu_rpe_ref

    def with_alpha(self, alpha: float) -> "AbsorptionProfile":
        return self.model_copy(update={"alpha": float(alpha)})

    def layer_coefficients(self, geometry: Geometry) -> List[float]:
        """mu per layer (1/m)."""
        mu = [0.0] * geometry.n_layers
        mu[geometry.rpe_layer] = self.mu_rpe
        mu[geometry.choroid_layer] = self.mu_choroid
        return mu


class OcpSpec(BaseModel):
    """Horizon, input bound and peak-temperature targets of OCP(n)."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_steps: int = 5
    u_max: float = 0.1
    y_peak_ref: float = 30.0
    y_peak_max: float = 32.0
    peak_confidence: float = 2.0

    def check(self) -> "OcpSpec":
        if not self.peak_confidence >= 0:
            raise OcpSpecError(f"peak_confidence must be >= 0, got {self.peak_confidence}")
        if self.n_steps < 2:
            raise OcpSpecError(f"horizon N must be >= 2, got {self.n_steps}")
        if self.u_max <= 0:
            raise OcpSpecError(f"u_max must be positive, got {self.u_max}")
        if not 0 <= self.y_peak_ref < self.y_peak_max:
            raise OcpSpecError(
                f"need 0 <= y_peak_ref < y_peak_max, got {self.y_peak_ref}, {self.y_peak_max}"
            )
        return self


class CostConfig(BaseModel):
    """Penalty structure (R0, R1, R2) of the MPC stage cost."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    r0_schedule: R0Schedule = R0Schedule.ONE
    r1: float = Field(default=0.0, ge=0)
    r2: float = Field(default=0.0, ge=0)

    def r0(self, n: int) -> float:
        return self.r0_schedule.weight(n)
