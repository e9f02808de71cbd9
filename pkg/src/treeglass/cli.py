from __future__ import annotations

import argparse
import json
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.logging_config import logger

from .config import ExperimentConfig, load_config
from .constants import (
    COMMANDS,
    CSV_FLOAT_FORMAT,
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_INEQUALITY,
    EXIT_OK,
    EXIT_SIZE_GUARD,
    SCHEMA_HEADER,
    SIDECAR_SUFFIX,
    VERSIONED_PACKAGES,
)
from .errors import ConfigError, ConvergenceError, InequalityViolation, SizeGuardError
from .experiments import ExperimentResult, run_experiment
from .settings import settings

COMMAND_HELP = {
    "exact-gap": "Exact spectral gap of a dynamics on small trees",
    "sweep-height": "Critical gap bounds and exact gaps across heights",
    "sweep-beta": "Near-critical gap bounds across epsilon at fixed height",
    "spatial-mixing": "Reconstruction Delta and m_v against their capacity bounds",
    "censoring": "Censored against full schedules from the all-plus start",
    "blockdyn": "Block dynamics gap, decomposition and comparison bounds",
    "capacity": "Effective resistance, L2-capacity and Nash-Williams per depth",
    "speedup": "Speed-up coupling survival and projected Gibbs distance",
    "tmix": "Mixing-time report from a fixed start (exact or Monte Carlo)",
    "lemma-scan": "Grid scan of the f-inequality",
}


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="", help="Experiment config JSON; flags override it")
    parser.add_argument("--b", type=int, default=None, help="Branching factor")
    parser.add_argument("--h", type=int, default=None, help="Tree height")
    parser.add_argument("--heights", type=int, nargs="+", default=None, help="Heights to sweep")
    beta = parser.add_mutually_exclusive_group()
    beta.add_argument("--beta", type=float, default=None, help="Explicit inverse temperature")
    beta.add_argument("--critical", action="store_true", help="Use beta_c = atanh(1/sqrt(b))")
    beta.add_argument("--epsilon", type=float, default=None, help="theta = sqrt((1+eps)/b)")
    parser.add_argument("--epsilons", type=float, nargs="+", default=None, help="Epsilon grid")
    parser.add_argument(
        "--boundary",
        choices=["free", "plus", "minus", "random"],
        default=None,
        help="Boundary condition on the leaves",
    )
    parser.add_argument(
        "--tau-file", default=None, help="Leaf spins file ('+'/'-' per leaf, BFS order)"
    )
    parser.add_argument(
        "--dynamics", choices=["single_site", "block", "speedup"], default=None, help="Dynamics"
    )
    parser.add_argument("--alpha", type=float, default=None, help="Block level ratio in (0, 1/2]")
    parser.add_argument("--ell", type=int, default=None, help="Explicit lower block level")
    parser.add_argument("--r", type=int, default=None, help="Explicit block radius")
    parser.add_argument("--hat-depth", type=int, default=None, help="Depth of the T-hat ball")
    parser.add_argument("--mode", choices=["exact", "mc"], default=None, help="Exact or MC")
    parser.add_argument(
        "--time-mode", choices=["discrete", "continuous"], default=None, help="Time model"
    )
    parser.add_argument("--replicas", type=int, default=None, help="Monte Carlo replicas")
    parser.add_argument("--samples", type=int, default=None, help="Random boundaries/schedules")
    parser.add_argument("--t-max", type=float, default=None, help="Time horizon")
    parser.add_argument("--t-step", type=float, default=None, help="Time grid step")
    parser.add_argument("--start", choices=["plus", "minus"], default=None, help="Start config")
    parser.add_argument("--kappa", type=float, default=None, help="Override kappa")
    parser.add_argument(
        "--exact-max-h", type=int, default=None, help="Largest height solved exactly in sweeps"
    )
    parser.add_argument("--seed", type=int, default=None, help="Random seed")
    parser.add_argument("--out", default=None, help="Output CSV path")
    parser.add_argument(
        "--trajectory", default=None, help="tmix in mc mode: write one hex line per sweep"
    )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Glauber dynamics of the Ising model on regular trees."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=COMMAND_HELP[command])
        _add_common_arguments(sub)
    return parser.parse_args(argv)


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "b": args.b,
        "h": args.h,
        "heights": args.heights,
        "epsilons": args.epsilons,
        "boundary": args.boundary,
        "dynamics": args.dynamics,
        "alpha": args.alpha,
        "ell": args.ell,
        "r": args.r,
        "hat_depth": args.hat_depth,
        "mode": args.mode,
        "time_mode": args.time_mode,
        "replicas": args.replicas,
        "samples": args.samples,
        "t_max": args.t_max,
        "t_step": args.t_step,
        "start": args.start,
        "kappa": args.kappa,
        "exact_max_h": args.exact_max_h,
        "seed": args.seed,
        "out": args.out,
        "trajectory": args.trajectory,
    }
    if args.beta is not None:
        overrides |= {"beta_mode": "explicit", "beta": args.beta}
    elif args.epsilon is not None:
        overrides |= {"beta_mode": "epsilon", "epsilon": args.epsilon}
    elif args.critical:
        overrides["beta_mode"] = "critical"
    if args.tau_file is not None:
        overrides |= {"boundary": "tau", "tau_file": args.tau_file}
    return overrides


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    path = Path(args.config) if args.config else None
    return load_config(args.command, path, overrides_from_args(args))


def output_path(config: ExperimentConfig) -> Path:
    if config.out:
        return Path(config.out)
    return settings.results_dir / f"{config.command}_seed{config.seed}.csv"


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(SCHEMA_HEADER + "\n")
        frame.to_csv(handle, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, skiprows=1)


def _package_versions() -> dict[str, str]:
    out = {}
    for name in VERSIONED_PACKAGES:
        try:
            out[name] = version(name)
        except PackageNotFoundError:
            out[name] = "unknown"
    return out


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def write_json(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, ensure_ascii=True, default=_jsonable) + "\n",
        encoding="utf-8",
    )


def sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.name + SIDECAR_SUFFIX)


def write_outputs(config: ExperimentConfig, result: ExperimentResult, wall_time: float) -> Path:
    path = output_path(config)
    write_csv(result.frame, path)
    meta = {
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": _package_versions(),
        "wall_time_seconds": wall_time,
        "rows": int(len(result.frame)),
        "summary": {str(k): v for k, v in result.summary.items()},
    }
    write_json(sidecar_path(path), meta)
    logger.info("wrote %d rows to %s (sidecar %s)", len(result.frame), path, sidecar_path(path))
    if config.trajectory and result.trajectory:
        trajectory = Path(config.trajectory)
        trajectory.parent.mkdir(parents=True, exist_ok=True)
        trajectory.write_text("".join(line + "\n" for line in result.trajectory), encoding="utf-8")
        logger.info("wrote %d trajectory lines to %s", len(result.trajectory), trajectory)
    return path


def run_command(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    started = time.perf_counter()
    result = run_experiment(config)
    write_outputs(config, result, time.perf_counter() - started)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        return run_command(args)
    except (ConfigError, ValueError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except SizeGuardError as exc:
        logger.error("size guard: %s", exc)
        return EXIT_SIZE_GUARD
    except InequalityViolation as exc:
        logger.error("inequality violated: %s; row: %s", exc, exc.row)
        return EXIT_INEQUALITY
    except ConvergenceError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
