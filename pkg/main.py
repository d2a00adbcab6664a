#!/usr/bin/env python3
"""
Main entry point for the retinal laser MPC toolkit.

    python main.py build-rom --rate 1000 --out artifacts/rom_1k.npz
    python main.py run --preset underestimate-250 --seed 3 --out traces/run.csv
    python main.py profile --rate 250 --repetitions 3
    python main.py refine --resolutions 16x40,30x80,60x160
"""
import argparse
import sys
from pathlib import Path

from src.config import SCENARIO_PRESETS, config, load_simulation_config
from src.exceptions import ArtifactError, ConfigurationError, RetinaError
from src.harness import build_full_plant_model, resolve_reduced_model, run_closed_loop
from src.models import CostPresetName, PlantKind
from src.mor import build_reduced_model, save_reduced_model, step_response_error
from src.profiling import DEFAULT_HORIZONS, profile_latency
from src.refinement import refinement_study
from src.trace import export_trace
from src.utils.logger import get_logger, setup_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _resolution(text: str):
    try:
        n_r, n_z = text.lower().split("x")
        return int(n_r), int(n_z)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"resolution must look like 30x80, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retina-mpc", description=__doc__.splitlines()[1])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML scenario file")
    common.add_argument("--preset", action="append", choices=sorted(SCENARIO_PRESETS), help="named scenario preset (repeatable)")
    common.add_argument("--rate", type=int, choices=(250, 1000), help="loop rate in Hz")
    common.add_argument("--out", type=Path, help="output file")
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="console log level")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-rom", parents=[common], help="build and save the reduced model")

    for name, help_text in (("run", "run one closed-loop scenario"), ("profile", "profile loop latency over horizons")):
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.add_argument("--alpha-true", type=float, help="true RPE absorption factor of the plant")
        cmd.add_argument("--cost", choices=[c.value for c in CostPresetName], help="cost configuration")
        cmd.add_argument("--horizon", type=int, help="prediction horizon N")
        cmd.add_argument("--seed", type=int, help="measurement-noise seed")
        cmd.add_argument("--plant", choices=[p.value for p in PlantKind], help="simulation plant")
        cmd.add_argument("--rom", help="reduced-model artifact to load")
        if name == "profile":
            cmd.add_argument("--repetitions", type=int, default=1)

    refine = sub.add_parser("refine", parents=[common], help="grid refinement study")
    refine.add_argument("--resolutions", default="16x40,30x80,60x160", help="comma-separated n_r x n_z list")
    refine.add_argument("--alpha", type=float, default=0.7363)
    return parser


def _overrides(args) -> dict:
    return {
        "scenario.rate_hz": args.rate,
        "scenario.alpha_true": getattr(args, "alpha_true", None),
        "scenario.cost": getattr(args, "cost", None),
        "scenario.horizon": getattr(args, "horizon", None),
        "scenario.rng_seed": getattr(args, "seed", None),
        "scenario.plant": getattr(args, "plant", None),
        "scenario.rom_artifact": getattr(args, "rom", None),
    }


def cmd_build_rom(sim, args) -> int:
    dt = sim.scenario.dt
    full_model = build_full_plant_model(sim)
    reduced = build_reduced_model(sim, dt, full_model)
    for alpha in sim.mor.training_alphas:
        errors = step_response_error(full_model, reduced, alpha, sim.mor.snapshot_u_max, int(round(0.2 / dt)))
        logger.info(f"alpha={alpha}: relative step-response error y_vol={errors['y_vol']:.4%}, y_peak={errors['y_peak']:.4%}")
    out = args.out or Path(config.paths.artifact_dir) / f"rom_{sim.scenario.rate_hz}hz.npz"
    save_reduced_model(reduced, out)
    return EXIT_OK


def cmd_run(sim, args) -> int:
    trace = run_closed_loop(sim)
    out = args.out or Path(config.paths.trace_dir) / f"{sim.scenario.name}_{sim.scenario.rate_hz}hz_seed{sim.scenario.rng_seed}.csv"
    export_trace(trace, out)
    return EXIT_OK


def cmd_profile(sim, args) -> int:
    report = profile_latency(sim, repetitions=args.repetitions, horizons=DEFAULT_HORIZONS)
    print(report.to_string(index=False))
    if args.out:
        report.to_csv(args.out, index=False)
    return EXIT_OK


def cmd_refine(sim, args) -> int:
    resolutions = [_resolution(part) for part in args.resolutions.split(",")]
    table = refinement_study(
        sim.geometry, resolutions, args.alpha, sim.material, sim.optics, dt=sim.scenario.dt
    )
    print(table.to_string(index=False))
    if args.out:
        table.to_csv(args.out, index=False)
    return EXIT_OK


COMMANDS = {"build-rom": cmd_build_rom, "run": cmd_run, "profile": cmd_profile, "refine": cmd_refine}


def main(argv=None) -> int:
    """Parse arguments, dispatch, map failures to exit codes."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logger(args.log_level)
    try:
        sim = load_simulation_config(args.config, _overrides(args), args.preset)
        return COMMANDS[args.command](sim, args)
    except (ConfigurationError, ArtifactError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except RetinaError as e:
        logger.error(f"Run aborted: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
