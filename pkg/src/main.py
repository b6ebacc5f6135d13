#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Command line entry point for the federated GAN backdoor simulator.

1) run            train one scenario and write its run directory.
2) compare        evaluate ordering assertions across finished runs.
3) sweep-trigger  local vs full defense for several trigger sizes (tiny images).
4) gen-data       export a clean or triggered dataset as .fgs + .json.

Exit codes: 0 ok, 2 config error, 3 assertion failure, 4 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from rich_argparse import RawDescriptionRichHelpFormatter

from config import ScenarioPreset, output_root_from_env, parse_config
from errors import ConfigError, ConfigFileMissingError, FedGanError
from harness import compare_runs, run_scenario, sweep_trigger_sizes
# Logging from external file
from logger_setup import LoggerSetup
from poisoning import TriggerSpec, make_gaussian_ring, make_tiny_images, poison_dataset, save_dataset

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("FedGanCLI")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERTION = 3
EXIT_RUNTIME = 4


# ---------------------------------------------------------------------------
# 2) Subcommands
# ---------------------------------------------------------------------------
def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, args.preset, args.set or [], args.env_file)
    run_dir = run_scenario(cfg)
    print(run_dir)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    out_dir = args.out or str(Path(args.runs[0]).parent / "comparison")
    report = compare_runs(args.runs, args.assertions, out_dir)
    if not report.passed:
        failed = [a.text for a in report.assertions if not a.passed]
        logger.error("%d assertion(s) failed: %s", len(failed), failed)
        return EXIT_ASSERTION
    logger.info("All %d assertion(s) passed", len(report.assertions))
    return EXIT_OK


def _parse_sizes(raw: str) -> List[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError([("sizes", f"expected comma-separated integers, got '{raw}'")]) from e


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, None, args.set or [], args.env_file)
    report = sweep_trigger_sizes(cfg, _parse_sizes(args.sizes), args.workers, args.out)
    for row in report.extras.get("trigger_sweep", []):
        logger.info("size %d: full - local frechet %+.4f, kid %+.4f", row["size"], row["frechet_delta"], row["kid_delta"])
    return EXIT_OK if report.passed else EXIT_ASSERTION


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.kind == "ring":
        ds = make_gaussian_ring(args.modes, args.radius, args.sigma, args.n, args.seed, args.marker_dims)
        trigger = TriggerSpec.marker(2, args.trigger_size, args.trigger_seed, args.marker_value) if args.trigger_size else None
    else:
        ds = make_tiny_images(args.image_size, args.n, args.seed)
        trigger = (TriggerSpec.image_patch(args.trigger_size, (args.image_size, args.image_size), args.trigger_seed)
                   if args.trigger_size else None)
    if trigger is not None:
        if not trigger.fits(ds.sample_shape):
            raise ConfigError([("trigger-size", f"{args.trigger_size} does not fit samples of shape {ds.sample_shape}")])
        ds = poison_dataset(ds, trigger, args.poison_fraction, args.trigger_seed)
    print(save_dataset(ds, args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# 3) Argument parsing
# ---------------------------------------------------------------------------
def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    ascii_art = r"""
     _____       _  ___   _   _  _
    |  ___|__ __| |/ __| /_\ | \| |
    | |_ / -_) _` | (_ |/ _ \| .` |
    |_|  \___\__,_|\___/_/ \_\_|\_|
    """
    parser = argparse.ArgumentParser(
        prog="python src/main.py",
        description=ascii_art + "\nSimulate backdoor attacks and defenses in federated GAN training.",
        formatter_class=RawDescriptionRichHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable DEBUG logging.")
    parser.add_argument("--env-file", default=".env", help="Path to the .env file (FEDGAN_OUTPUT_ROOT).")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Train one scenario.", formatter_class=RawDescriptionRichHelpFormatter)
    run.add_argument("--config", help="YAML run configuration (defaults only when omitted).")
    run.add_argument("--preset", choices=[p.value for p in ScenarioPreset], help="Scenario preset to apply.")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key, e.g. training.rounds=50.")
    run.set_defaults(handler=cmd_run)

    cmp_ = sub.add_parser("compare", help="Compare finished runs.", formatter_class=RawDescriptionRichHelpFormatter)
    cmp_.add_argument("runs", nargs="+", help="Run directories.")
    cmp_.add_argument("--assert", dest="assertions", required=True, help="YAML file with an 'assertions' list.")
    cmp_.add_argument("--out", help="Report directory (default: <parent of first run>/comparison).")
    cmp_.set_defaults(handler=cmd_compare)

    sweep = sub.add_parser("sweep-trigger", help="Local vs full defense per trigger size.",
                           formatter_class=RawDescriptionRichHelpFormatter)
    sweep.add_argument("--config", help="Base YAML configuration (tiny_images data).")
    sweep.add_argument("--sizes", required=True, help="Comma-separated trigger sizes, e.g. 1,2,4.")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a base config key.")
    sweep.add_argument("--workers", type=int, default=1, help="Runs executed in parallel processes.")
    sweep.add_argument("--out", help="Report directory (default: <output_root>/sweep_trigger).")
    sweep.set_defaults(handler=cmd_sweep)

    gen = sub.add_parser("gen-data", help="Export a synthetic dataset.", formatter_class=RawDescriptionRichHelpFormatter)
    gen.add_argument("--kind", choices=["ring", "images"], required=True)
    gen.add_argument("--out", required=True, help="Output path; writes <out>.fgs and <out>.json.")
    gen.add_argument("--n", type=int, default=2000, help="Number of samples.")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--modes", type=int, default=8)
    gen.add_argument("--radius", type=float, default=2.0)
    gen.add_argument("--sigma", type=float, default=0.05)
    gen.add_argument("--marker-dims", type=int, default=1)
    gen.add_argument("--image-size", type=int, default=16, choices=[8, 16, 32])
    gen.add_argument("--trigger-size", type=int, default=0, help="Paste a trigger of this size (0 = clean).")
    gen.add_argument("--trigger-seed", type=int, default=7)
    gen.add_argument("--marker-value", type=float, default=1.0)
    gen.add_argument("--poison-fraction", type=float, default=1.0)
    gen.set_defaults(handler=cmd_gen_data)
    return parser.parse_args(argv)


# -------------------------------------------------------------------
def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_arguments(argv)

    # Logging level
    if args.verbose:
        LoggerSetup.set_level(logging.DEBUG)
    logger.debug("Parsed arguments: %s", args)
    if args.command == "gen-data" and not Path(args.out).is_absolute():
        root = output_root_from_env(args.env_file)
        if root:
            args.out = str(Path(root) / args.out)

    try:
        return args.handler(args)
    except (ConfigError, ConfigFileMissingError) as e:
        logger.critical("Configuration error: %s", e)
        return EXIT_CONFIG
    except FedGanError as e:
        logger.critical("Run failed: %s", e)
        return EXIT_RUNTIME
    except Exception as e:
        logger.critical("Unexpected failure: %s", e, exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
