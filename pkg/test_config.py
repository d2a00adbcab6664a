"""
Scenario configuration.

 Group 1: Shipped files and presets
   1.  scenario files load
   2.  named presets stack, later ones winning

 Group 2: Validation
   3.  bad values raise ConfigurationError

 Group 3: Derived quantities
   4.  sample period, step count and cost resolution
"""
from pathlib import Path

import pytest

from src.config import COST_PRESETS, SimulationConfig, load_simulation_config
from src.exceptions import ConfigurationError
from src.models import CostPresetName, PlantKind, R0Schedule


SCENARIOS = Path(__file__).parent / "scenarios"


# ── Group 1: Shipped files and presets ────────────────────────────────────────

def test_default_scenario_file():
    sim = load_simulation_config(SCENARIOS / "default.toml")
    assert sim.scenario.rate_hz == 250
    assert sim.scenario.plant is PlantKind.FULL
    assert sim.scenario.cost is CostPresetName.A
    assert sim.grid.n_r == 30 and sim.grid.n_z == 80
    assert sim.estimator.clamp == (0.2, 2.0)
    assert sim.mor.training_alphas == (0.3, 0.5, 0.7363, 0.9, 1.1, 1.5)
    assert sim.scenario.initial_probe is None


def test_probe_scenario_file():
    sim = load_simulation_config(SCENARIOS / "probe_1k.toml")
    assert sim.scenario.rate_hz == 1000
    assert sim.scenario.horizon == 2
    assert sim.scenario.cost is CostPresetName.KHZ
    assert sim.scenario.initial_probe.power_W == 0.02
    assert sim.scenario.initial_probe.steps == 1


def test_overrides_beat_file_values():
    sim = load_simulation_config(SCENARIOS / "default.toml", {"scenario.rng_seed": 7, "scenario.cost": None})
    assert sim.scenario.rng_seed == 7
    assert sim.scenario.cost is CostPresetName.A


def test_presets_stack():
    sim = load_simulation_config(presets=["underestimate-1k", "low-target"])
    assert sim.scenario.rate_hz == 1000
    assert sim.scenario.alpha_true == 1.1
    assert sim.scenario.cost is CostPresetName.KHZ
    assert sim.scenario.y_peak_ref == 10.0
    assert sim.scenario.y_peak_max == 12.0

    probe = load_simulation_config(presets=["probe-30K"])
    assert probe.scenario.initial_probe.steps == 1


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        load_simulation_config(presets=["overestimate-500"])


# ── Group 2: Validation ───────────────────────────────────────────────────────

@pytest.mark.parametrize(
    "overrides",
    [
        {"scenario.rate_hz": 500},
        {"scenario.alpha_init": 3.0},
        {"scenario.y_peak_ref": 32.0},
        {"scenario.horizon": 1},
        {"scenario.colour": "red"},
        {"scenario.cost": "e"},
        {"estimator.clamp": [2.0, 0.2]},
        {"mor.training_alphas": [0.5, 0.3]},
        {"geometry.layer_bounds": [0.0, 5.0e-4, 3.0e-4, 1.2e-3]},
        {"scenario.duration_s": 1.0e5},
        {"noscenario": 1},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(ConfigurationError):
        SimulationConfig().with_overrides(overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_simulation_config(tmp_path / "absent.toml")


def test_unparsable_file(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[scenario\nrate_hz = 250\n")
    with pytest.raises(ConfigurationError):
        load_simulation_config(path)


def test_unknown_section_in_file(tmp_path):
    path = tmp_path / "extra.toml"
    path.write_text("[laser]\nwavelength_nm = 532\n")
    with pytest.raises(ConfigurationError):
        load_simulation_config(path)


# ── Group 3: Derived quantities ───────────────────────────────────────────────

@pytest.mark.parametrize("rate, dt, steps", [(250, 0.004, 100), (1000, 0.001, 400)])
def test_period_and_step_count(rate, dt, steps):
    scenario = SimulationConfig().with_overrides({"scenario.rate_hz": rate}).scenario
    assert scenario.dt == dt
    assert scenario.n_steps == steps


def test_cost_presets_resolve():
    for name, cost in COST_PRESETS.items():
        scenario = SimulationConfig().with_overrides({"scenario.cost": name.value}).scenario
        assert scenario.cost_config() == cost
    assert COST_PRESETS[CostPresetName.A].r1 == 5e4
    assert COST_PRESETS[CostPresetName.D].r2 == 5e1
    assert COST_PRESETS[CostPresetName.KHZ].r1 == COST_PRESETS[CostPresetName.KHZ].r2 == 0.0


def test_custom_cost():
    scenario = SimulationConfig().with_overrides(
        {"scenario.cost": "custom", "scenario.r0_schedule": "chi3", "scenario.r1": 2.0, "scenario.r2": 3.0}
    ).scenario
    cost = scenario.cost_config()
    assert (cost.r0_schedule, cost.r1, cost.r2) == (R0Schedule.CHI3, 2.0, 3.0)


def test_chi3_switches_off_state_cost_early():
    cost = COST_PRESETS[CostPresetName.B]
    assert [cost.r0(n) for n in range(6)] == [1.0, 0.0, 0.0, 0.0, 1.0, 1.0]
    assert all(COST_PRESETS[CostPresetName.A].r0(n) == 1.0 for n in range(6))
