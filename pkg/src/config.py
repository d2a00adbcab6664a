"""
Configuration management for the retinal laser MPC toolkit.

Process settings (logging, working directories) come from the environment and
``.env``. Run settings come from a TOML scenario file whose sections map onto
the models below; CLI flags override file values.
"""
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .exceptions import ConfigurationError
from .models import (
    CostConfig,
    CostPresetName,
    Geometry,
    MaterialConstants,
    PlantKind,
    R0Schedule,
    RadialExtent,
    SourceQuadrature,
    VolWeightSign,
)

load_dotenv()

SUPPORTED_RATES_HZ = (250, 1000)
MAX_LOOP_STEPS = 10_000_000


class LoggingConfig(BaseSettings):
    """Logging configuration settings."""
    model_config = SettingsConfigDict(env_prefix="RETINA_", extra="ignore")

    log_level: str = "INFO"
    log_file: str = "logs/retina_mpc.log"
    error_log_file: str = "logs/errors.log"


class PathsConfig(BaseSettings):
    """Working directories for artifacts and traces."""
    model_config = SettingsConfigDict(env_prefix="RETINA_", extra="ignore")

    artifact_dir: str = "artifacts"
    trace_dir: str = "traces"


class Config:
    """Main process configuration."""
    def __init__(self):
        self.logging = LoggingConfig()
        self.paths = PathsConfig()


# Global configuration instance
config = Config()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OpticsConfig(_Section):
    """Absorption constants and output-operator conventions."""
    mu_rpe_ref: float = Field(default=120400.0, ge=0)
    mu_choroid: float = Field(default=2662.2, ge=0)
    vol_weight_sign: VolWeightSign = VolWeightSign.PLUS
    source_quadrature: SourceQuadrature = SourceQuadrature.CELL
    vol_radial_extent: RadialExtent = RadialExtent.FULL


class GridConfig(_Section):
    """Finite-difference resolution (cell counts)."""
    n_r: int = 30
    n_z: int = 80


class MorConfig(_Section):
    """Snapshot, POD and DEIM settings for the reduced model."""
    rank: int = Field(default=6, ge=1)
    deim_order_b: int = Field(default=4, ge=1)
    deim_order_c: int = Field(default=4, ge=1)
    training_alphas: Tuple[float, ...] = (0.3, 0.5, 0.7363, 0.9, 1.1, 1.5)
    snapshot_duration_s: float = Field(default=0.2, gt=0)
    snapshot_u_max: float = Field(default=0.1, gt=0)
    n_pulses: int = Field(default=10, ge=0)
    excitation_seed: int = 0
    rank_rtol: float = Field(default=1e-9, gt=0)

    @field_validator("training_alphas")
    @classmethod
    def _increasing(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value:
            raise ValueError("training_alphas must not be empty")
        if any(a <= 0 for a in value):
            raise ValueError("training_alphas must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("training_alphas must be strictly increasing")
        return value


class EkfConfig(_Section):
    """Noise model and prior of the joint state/parameter EKF."""
    q_state: float = Field(default=1e-6, ge=0)
    q_alpha: float = Field(default=2e-4, ge=0)
    r_meas: float = Field(default=0.288 ** 2, gt=0)
    p0_state: float = Field(default=1e-2, gt=0)
    p0_alpha: float = Field(default=4.0, gt=0)
    alpha0: float = Field(default=0.7363, gt=0)
    clamp: Tuple[float, float] = (0.2, 2.0)

    @field_validator("clamp")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < value[0] < value[1]:
            raise ValueError(f"clamp must satisfy 0 < lo < hi, got {value}")
        return value


class SolverSettings(_Section):
    """Operator-splitting QP solver settings."""
    rho: float = Field(default=0.1, gt=0)
    sigma: float = Field(default=1e-6, gt=0)
    relax: float = Field(default=1.6, gt=0, lt=2)
    eps_abs: float = Field(default=1e-6, ge=0)
    eps_rel: float = Field(default=1e-6, ge=0)
    eps_prim_inf: float = Field(default=1e-5, gt=0)
    eps_dual_inf: float = Field(default=1e-5, gt=0)
    max_iter: int = Field(default=4000, ge=1)
    check_interval: int = Field(default=10, ge=1)
    scaling_iters: int = Field(default=10, ge=0)
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = Field(default=5.0, gt=1)


class ProbeConfig(_Section):
    """Constant pre-control excitation."""
    power_W: float = Field(default=0.02, ge=0)
    steps: int = Field(default=1, ge=1)


class ScenarioConfig(_Section):
    """One closed-loop experiment."""
    name: str = "default"
    rate_hz: int = 250
    plant: PlantKind = PlantKind.FULL
    alpha_true: float = Field(default=1.1, gt=0)
    alpha_init: float = Field(default=0.7363, gt=0)
    duration_s: float = Field(default=0.4, gt=0)
    cost: CostPresetName = CostPresetName.A
    r0_schedule: R0Schedule = R0Schedule.ONE
    r1: float = Field(default=0.0, ge=0)
    r2: float = Field(default=0.0, ge=0)
    horizon: int = Field(default=5, ge=2)
    u_max: float = Field(default=0.1, gt=0)
    y_peak_ref: float = Field(default=30.0, ge=0)
    y_peak_max: float = Field(default=32.0, gt=0)
    # standard deviations of alpha_hat covered by the peak rows, 0 = nominal
    peak_confidence: float = Field(default=2.0, ge=0)
    noise_std_K: float = Field(default=0.288, ge=0)
    rng_seed: int = 0
    initial_probe: Optional[ProbeConfig] = None
    record_timing: bool = True
    rom_artifact: Optional[str] = None

    @field_validator("rate_hz")
    @classmethod
    def _supported_rate(cls, value: int) -> int:
        if value not in SUPPORTED_RATES_HZ:
            raise ValueError(f"rate_hz must be one of {SUPPORTED_RATES_HZ}, got {value}")
        return value

    @model_validator(mode="after")
    def _bounded_length(self) -> "ScenarioConfig":
        if self.n_steps > MAX_LOOP_STEPS:
            raise ValueError(f"duration_s * rate_hz exceeds {MAX_LOOP_STEPS} steps")
        return self

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    def cost_config(self) -> CostConfig:
        """Resolve the cost preset, or the explicit weights for ``custom``."""
        if self.cost is CostPresetName.CUSTOM:
            return CostConfig(r0_schedule=self.r0_schedule, r1=self.r1, r2=self.r2)
        return COST_PRESETS[self.cost]


class SimulationConfig(_Section):
    """Everything a run needs, one field per TOML section."""
    scenario: ScenarioConfig = ScenarioConfig()
    material: MaterialConstants = MaterialConstants()
    geometry: Geometry = Geometry()
    optics: OpticsConfig = OpticsConfig()
    grid: GridConfig = GridConfig()
    mor: MorConfig = MorConfig()
    estimator: EkfConfig = EkfConfig()
    solver: SolverSettings = SolverSettings()

    def with_overrides(self, overrides: Mapping[str, Any]) -> "SimulationConfig":
        """Apply dotted-key overrides such as ``{"scenario.rate_hz": 1000}``."""
        return _validate(_merge(self.model_dump(mode="json"), overrides))


COST_PRESETS: Dict[CostPresetName, CostConfig] = {
    CostPresetName.A: CostConfig(r0_schedule=R0Schedule.ONE, r1=5e4, r2=0.0),
    CostPresetName.B: CostConfig(r0_schedule=R0Schedule.CHI3, r1=5e1, r2=0.0),
    CostPresetName.C: CostConfig(r0_schedule=R0Schedule.ONE, r1=0.0, r2=5e4),
    CostPresetName.D: CostConfig(r0_schedule=R0Schedule.CHI3, r1=0.0, r2=5e1),
    CostPresetName.KHZ: CostConfig(r0_schedule=R0Schedule.ONE, r1=0.0, r2=0.0),
    CostPresetName.EXP: CostConfig(r0_schedule=R0Schedule.ONE, r1=0.0, r2=8e5),
}

# Named scenario presets; each entry is a set of dotted-key overrides.
SCENARIO_PRESETS: Dict[str, Dict[str, Any]] = {
    "underestimate-250": {"scenario.rate_hz": 250, "scenario.alpha_true": 1.1, "scenario.cost": "a"},
    "overestimate-250": {"scenario.rate_hz": 250, "scenario.alpha_true": 0.5, "scenario.cost": "a"},
    "underestimate-1k": {"scenario.rate_hz": 1000, "scenario.alpha_true": 1.1, "scenario.cost": "kHz"},
    "overestimate-1k": {"scenario.rate_hz": 1000, "scenario.alpha_true": 0.5, "scenario.cost": "kHz"},
    "low-target": {"scenario.y_peak_ref": 10.0, "scenario.y_peak_max": 12.0},
    "probe-30K": {
        "scenario.y_peak_ref": 30.0,
        "scenario.y_peak_max": 32.0,
        "scenario.initial_probe": {"power_W": 0.02, "steps": 1},
    },
}


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in base.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override key must be 'section.key', got {dotted!r}")
        merged.setdefault(section, {})[key] = value
    return merged


def _validate(data: Mapping[str, Any]) -> SimulationConfig:
    try:
        sim = SimulationConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e
    sim.geometry.check()
    lo, hi = sim.estimator.clamp
    if not lo <= sim.scenario.alpha_init <= hi:
        raise ConfigurationError(
            f"scenario.alpha_init={sim.scenario.alpha_init} outside the estimator clamp [{lo}, {hi}]"
        )
    if sim.scenario.y_peak_ref >= sim.scenario.y_peak_max:
        raise ConfigurationError("scenario.y_peak_ref must be below scenario.y_peak_max")
    return sim


def load_simulation_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    presets: Optional[List[str]] = None,
) -> SimulationConfig:
    """Read a TOML scenario file, apply named presets, then dotted overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
    for name in presets or []:
        if name not in SCENARIO_PRESETS:
            raise ConfigurationError(f"unknown scenario preset {name!r}; known: {sorted(SCENARIO_PRESETS)}")
        data = _merge(data, SCENARIO_PRESETS[name])
    return _validate(_merge(data, overrides or {}))
