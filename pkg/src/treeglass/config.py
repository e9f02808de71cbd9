from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .constants import COMMANDS
from .errors import ConfigError
from .glauber_dynamics import (
    BlockCover,
    SpeedupSpec,
    block_cover_from_levels,
    block_levels,
    level_block_cover,
)
from .tree_model import BoundaryCondition, IsingParams, TreeShape

BETA_MODES = ("critical", "explicit", "epsilon")
BOUNDARIES = ("free", "plus", "minus", "tau", "random")
DYNAMICS = ("single_site", "block", "speedup")
MODES = ("exact", "mc")
TIME_MODES = ("discrete", "continuous")


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    b: int = 2
    h: int = 2
    heights: tuple[int, ...] = ()
    beta_mode: str = "critical"
    beta: float | None = None
    epsilon: float | None = None
    epsilons: tuple[float, ...] = ()
    boundary: str = "free"
    boundaries: tuple[str, ...] = ()
    tau_file: str | None = None
    dynamics: str = "single_site"
    alpha: float | None = None
    ell: int | None = None
    r: int | None = None
    hat_depth: int | None = None
    mode: str = "exact"
    time_mode: str = "discrete"
    replicas: int = 100
    samples: int = 50
    t_max: float = 200.0
    t_step: float = 1.0
    times: tuple[float, ...] = ()
    start: str = "plus"
    seed: int = 0
    kappa: float | None = None
    exact_max_h: int = 2
    out: str | None = None
    trajectory: str | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.b < 2:
            raise ConfigError(f"b must be >= 2, got {self.b!r}")
        if self.h < 0 or any(h < 0 for h in self.heights):
            raise ConfigError("heights must be >= 0")
        _choice("beta_mode", self.beta_mode, BETA_MODES)
        _choice("dynamics", self.dynamics, DYNAMICS)
        _choice("mode", self.mode, MODES)
        _choice("time_mode", self.time_mode, TIME_MODES)
        _choice("start", self.start, ("plus", "minus"))
        for name in self.boundary_names():
            _choice("boundary", name, BOUNDARIES)
        if self.beta_mode == "explicit" and (self.beta is None or self.beta < 0.0):
            raise ConfigError("beta_mode 'explicit' needs beta >= 0")
        if self.beta_mode == "epsilon" and (self.epsilon is None or self.epsilon < 0.0):
            raise ConfigError("beta_mode 'epsilon' needs epsilon >= 0")
        if any(e < 0.0 for e in self.epsilons):
            raise ConfigError("epsilons must be >= 0")
        if "tau" in self.boundary_names() and not self.tau_file:
            raise ConfigError("boundary 'tau' needs tau_file")
        if self.alpha is not None and not 0.0 < self.alpha <= 0.5:
            raise ConfigError(f"alpha must lie in (0, 1/2], got {self.alpha!r}")
        if self.replicas < 1 or self.samples < 1:
            raise ConfigError("replicas and samples must be >= 1")
        if self.t_max <= 0.0 or self.t_step <= 0.0:
            raise ConfigError("t_max and t_step must be positive")
        if self.kappa is not None and self.kappa <= 0.0:
            raise ConfigError(f"kappa must be positive, got {self.kappa!r}")

    def boundary_names(self) -> tuple[str, ...]:
        return self.boundaries or (self.boundary,)

    def height_values(self) -> tuple[int, ...]:
        return self.heights or (self.h,)

    def shape(self, h: int | None = None) -> TreeShape:
        return TreeShape(self.b, self.h if h is None else h)

    def params(self, epsilon: float | None = None) -> IsingParams:
        if epsilon is not None:
            return IsingParams.near_critical(self.b, epsilon)
        if self.beta_mode == "critical":
            return IsingParams.critical(self.b)
        if self.beta_mode == "epsilon":
            return IsingParams.near_critical(self.b, float(self.epsilon))  # type: ignore[arg-type]
        return IsingParams(beta=float(self.beta))  # type: ignore[arg-type]

    def boundary_condition(
        self, shape: TreeShape, name: str | None = None, rng: np.random.Generator | None = None
    ) -> BoundaryCondition:
        name = name or self.boundary
        if name == "free":
            return BoundaryCondition.free()
        if name == "plus":
            return BoundaryCondition.all_plus()
        if name == "minus":
            return BoundaryCondition.all_minus()
        if name == "tau":
            return read_tau_file(Path(self.tau_file), shape)  # type: ignore[arg-type]
        return BoundaryCondition.random_leaves(shape, rng or np.random.default_rng(self.seed))

    def levels(self, shape: TreeShape) -> tuple[int, int]:
        """(ell, r) from explicit values or from alpha."""
        if self.ell is not None:
            r = self.r if self.r is not None else shape.h - self.ell
            return self.ell, r
        if self.alpha is None:
            raise ConfigError("block parameters need alpha or ell")
        try:
            return block_levels(shape.h, self.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def cover(self, shape: TreeShape) -> BlockCover:
        if self.ell is None and self.alpha is not None:
            return level_block_cover(shape, self.alpha)
        ell, _ = self.levels(shape)
        return block_cover_from_levels(shape, ell)

    def speedup_spec(self, shape: TreeShape) -> SpeedupSpec:
        ell, r = self.levels(shape)
        try:
            return SpeedupSpec.leftmost(shape, ell, r)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def time_grid(self) -> np.ndarray:
        if self.times:
            return np.asarray(self.times, dtype=np.float64)
        return np.arange(0.0, self.t_max + 0.5 * self.t_step, self.t_step)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


def _choice(name: str, value: str, allowed: tuple[str, ...]) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TUPLE_FIELDS = {"heights": int, "epsilons": float, "boundaries": str, "times": float}


def _coerce(key: str, value: Any) -> Any:
    if key in _TUPLE_FIELDS:
        if isinstance(value, (str, int, float)):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return tuple(_TUPLE_FIELDS[key](v) for v in value)
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {value!r}")
    return value


def load_config_file(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("Config JSON must be an object")
    return payload


def build_config(
    command: str,
    file_values: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """File values first, then every override that is not None."""
    merged: dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is None and source is overrides:
                continue
            merged[key] = _coerce(key, value)
    file_command = merged.pop("command", command)
    if file_command != command:
        raise ConfigError(f"config is for command {file_command!r}, not {command!r}")
    try:
        return ExperimentConfig(command=command, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(
    command: str, path: Path | None = None, overrides: Mapping[str, Any] | None = None
) -> ExperimentConfig:
    file_values = load_config_file(path) if path is not None else {}
    return build_config(command, file_values, overrides)


def with_overrides(config: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    return replace(config, **{k: _coerce(k, v) for k, v in changes.items()})


def read_tau_file(path: Path, shape: TreeShape) -> BoundaryCondition:
    """One '+' or '-' per line, one line per leaf in BFS order."""
    if not path.exists():
        raise ConfigError(f"tau file not found: {path}")
    lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    leaves = shape.leaves
    if len(lines) != len(leaves):
        raise ConfigError(f"tau file {path} has {len(lines)} lines, expected {len(leaves)} leaves")
    spins = []
    for i, line in enumerate(lines, start=1):
        if line not in {"+", "-"}:
            raise ConfigError(f"tau file {path} line {i}: expected '+' or '-', got {line!r}")
        spins.append(1 if line == "+" else -1)
    return BoundaryCondition.arbitrary(shape, spins)


def write_tau_file(path: Path, boundary: BoundaryCondition, shape: TreeShape) -> None:
    frozen = boundary.frozen_spins(shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join("+\n" if frozen[v] == 1 else "-\n" for v in shape.leaves), encoding="utf-8"
    )
