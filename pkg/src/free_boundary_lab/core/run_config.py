"""
File: run_config.py
Description: Typed run configuration (problem, grid, mc, eval, output sections) parsed from YAML,
    with defaults, cross-field checks and serialization back to YAML.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.utils.helpers import load_yaml_config

SECTIONS = ("problem", "grid", "mc", "eval", "output")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemConfig(_Section):
    kind: Literal["put", "call", "custom_time_inhomogeneous"]
    K: float = Field(gt=0)
    r: float
    delta: float
    sigma: float = Field(gt=0)
    T: float = Field(gt=0)
    T1: float = Field(gt=0)
    x1: float
    x2: float

    @model_validator(mode="after")
    def _check_ranges(self) -> "ProblemConfig":
        if not self.T1 < self.T:
            raise ValueError(f"need T1 < T, got T1={self.T1}, T={self.T}")
        if not self.x1 < self.x2:
            raise ValueError(f"need x1 < x2, got x1={self.x1}, x2={self.x2}")
        return self


class GridConfig(_Section):
    N_t: int = Field(400, ge=64)
    N_x: int = Field(400, ge=64)
    x_lo: Optional[float] = None
    x_hi: Optional[float] = None
    psor_tol_factor: float = Field(1e-11, gt=0, le=1e-9)
    slope_window: int = Field(5, ge=3)
    refine: bool = True


class McConfig(_Section):
    seed: int = Field(ge=0)
    n_paths: int = Field(200_000, ge=1)
    dt_path: Optional[float] = Field(None, gt=0)
    rho_floor: Optional[float] = Field(None, gt=0)
    bridge_max: bool = True
    batch_size: int = Field(500, ge=1)
    n_q: int = Field(64, ge=4)
    vh_n_paths: Optional[int] = Field(None, ge=1)
    udot_n_paths: int = Field(20_000, ge=1)
    bessel_n_paths: int = Field(100_000, ge=100)


class EvalConfig(_Section):
    T2: Optional[float] = None
    t_list: Optional[List[float]] = None
    h_list: List[float] = Field(default_factory=lambda: [0.08, 0.04, 0.02, 0.01])
    vh_h: float = Field(0.05, gt=0, lt=1)
    udot_points: Optional[List[Tuple[float, float]]] = None
    se_multiplier: float = Field(3.0, gt=0)
    rel_tol: float = Field(0.15, gt=0)
    growth_tol: float = Field(0.10, gt=0)
    expansion_tol: float = Field(0.25, gt=0)
    binomial_tol: float = Field(2e-3, gt=0)
    binomial_steps: int = Field(5000, ge=10)
    terminal_rel_tol: float = Field(0.05, gt=0)
    terminal_t_offsets: List[int] = Field(default_factory=lambda: [10, 5, 2])
    terminal_substeps: int = Field(50, ge=1)
    velocity_rel_tol: float = Field(0.15, gt=0)
    velocity_pass_fraction: float = Field(0.8, gt=0, le=1)
    min_order: float = 1.0

    @model_validator(mode="after")
    def _check_lists(self) -> "EvalConfig":
        h = self.h_list
        if len(h) < 2 or any(v <= 0 for v in h) or any(b >= a for a, b in zip(h, h[1:])):
            raise ValueError("h_list must hold at least two positive, strictly decreasing values")
        offsets = self.terminal_t_offsets
        if any(k < 1 for k in offsets) or any(b >= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("terminal_t_offsets must be positive and strictly decreasing")
        return self


class OutputConfig(_Section):
    dir: str = "outputs"


class RunConfig(_Section):
    """Full run configuration; ``resolved_*`` helpers fill the defaults tied to the problem."""

    problem: ProblemConfig
    grid: GridConfig = Field(default_factory=GridConfig)
    mc: McConfig
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        p, e, g = self.problem, self.eval, self.grid
        T2 = self.resolved_T2
        if not 0.0 <= T2 < p.T1:
            raise ValueError(f"eval.T2 must satisfy 0 <= T2 < T1={p.T1}, got {T2}")
        for t in self.resolved_t_list:
            if not (0.0 <= t <= T2 and t < p.T1):
                raise ValueError(f"eval.t_list: t={t} must lie in [0, T2={T2}] and below T1={p.T1}")
        for t, _ in e.udot_points or []:
            if not 0.0 <= t < p.T1:
                raise ValueError(f"eval.udot_points: t={t} must lie in [0, T1)")
        span = p.x2 - p.x1
        if g.x_lo is not None and p.x1 - g.x_lo < 0.1 * span:
            raise ValueError("grid.x_lo must leave a margin of at least 10% of x2 - x1 below x1")
        if g.x_hi is not None and g.x_hi - p.x2 < 0.1 * span:
            raise ValueError("grid.x_hi must leave a margin of at least 10% of x2 - x1 above x2")
        return self

    @property
    def resolved_T2(self) -> float:
        return self.eval.T2 if self.eval.T2 is not None else 0.8 * self.problem.T1

    @property
    def resolved_t_list(self) -> List[float]:
        if self.eval.t_list is not None:
            return list(self.eval.t_list)
        return [f * self.problem.T1 for f in (0.2, 0.4, 0.6)]

    @property
    def resolved_dt_path(self) -> float:
        return self.mc.dt_path if self.mc.dt_path is not None else 2e-4 * self.problem.T1

    @property
    def resolved_vh_n_paths(self) -> int:
        return self.mc.vh_n_paths if self.mc.vh_n_paths is not None else self.mc.n_paths


def required_keys() -> List[str]:
    """Dotted names of the keys without defaults."""
    keys = []
    for section in SECTIONS:
        model = RunConfig.model_fields[section].annotation
        for name, info in model.model_fields.items():
            if info.is_required():
                keys.append(f"{section}.{name}")
    return keys


def _format_errors(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"])
        lines.append(f"{loc or '<root>'}: {item['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> RunConfig:
    """Validates a mapping of sections into a RunConfig.

    Raises:
        ConfigError: On unknown sections or keys, missing required keys or failed checks.
    """
    if not data:
        raise ConfigError("Empty configuration; required keys: " + ", ".join(required_keys()))
    data = dict(data)
    unknown = [k for k in data if k not in SECTIONS]
    if unknown:
        raise ConfigError(f"Unknown section(s): {', '.join(map(str, unknown))}")
    for section in ("problem", "mc"):
        if data.get(section) is None:
            data[section] = {}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def parse_config(path: Union[str, Path]) -> RunConfig:
    """Reads and validates a YAML run configuration.

    Args:
        path: Path to the YAML file.

    Returns:
        The typed configuration with defaults filled.

    Raises:
        ConfigError: If the file is missing, malformed, repeats a key or fails validation.
    """
    try:
        data = load_yaml_config(path)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    return config_from_dict(data)


def serialize_config(config: RunConfig) -> str:
    """YAML text that parses back to an equal RunConfig."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def with_overrides(config: RunConfig, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Applies the --seed and --out command-line overrides."""
    data = config.model_dump()
    if seed is not None:
        data["mc"]["seed"] = seed
    if out is not None:
        data["output"]["dir"] = out
    return config_from_dict(data)
