"""
File: cli.py
Description: Config-driven runner behind the command line: executes the stages of a
    subcommand in order, writes run_report.yaml and maps the outcome to an exit code.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numba
import numpy as np
import scipy
from loguru import logger

import free_boundary_lab
from free_boundary_lab.core.exceptions import ConfigError, DomainError, NumericalFailureError
from free_boundary_lab.core.run_config import RunConfig, parse_config, with_overrides
from free_boundary_lab.interfaces.stages import STAGES, PipelineContext, StageResult
from free_boundary_lab.services.artifacts import ArtifactWriter
from free_boundary_lab.utils.paths import ROOT_DIR
from free_boundary_lab.utils.text_helpers import SCHEMA_VERSION

SUBCOMMANDS = ("solve", "boundary", "lambda", "vh", "verify-stefan", "bessel-check", "all")
ALL_STAGES = ("solve", "boundary", "lambda", "vh", "verify-stefan", "bessel-check")
STOP_BELOW_STAGES = ("lambda", "vh")

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class RunReport:
    """Per-stage summaries of one run with the provenance needed to reproduce it."""

    subcommand: str
    seed: int
    workers: int
    config: dict
    stages: Dict[str, StageResult] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def verdict(self) -> str:
        return "FAIL" if any(s.verdict == "FAIL" for s in self.stages.values()) else "PASS"

    def to_dict(self) -> dict:
        return _plain({
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "seed": self.seed,
            "workers": self.workers,
            "versions": {
                "free_boundary_lab": free_boundary_lab.__version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
            "config": self.config,
            "stages": {
                name: {"verdict": s.verdict, "checks": s.verdicts, "summary": s.summary}
                for name, s in self.stages.items()
            },
            "skipped": self.skipped,
            "wall_clock_s": self.wall_clock_s,
            "verdict": self.verdict,
        })


def _plain(value):
    """Nested numpy scalars and tuples as plain YAML-safe Python values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def stages_for(subcommand: str, config: RunConfig) -> tuple[list[str], list[str]]:
    """Stage names to run for a subcommand and the ones ``all`` skips for this geometry.

    Raises:
        ConfigError: If the subcommand is unknown.
    """
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"Unknown subcommand '{subcommand}'; expected one of {', '.join(SUBCOMMANDS)}")
    if subcommand != "all":
        return [subcommand], []
    if config.problem.kind == "call":
        return [s for s in ALL_STAGES if s not in STOP_BELOW_STAGES], list(STOP_BELOW_STAGES)
    return list(ALL_STAGES), []


def execute(subcommand: str, config: RunConfig, workers: int = 1) -> RunReport:
    """Runs the stages of ``subcommand`` and writes run_report.yaml.

    Args:
        subcommand: One of SUBCOMMANDS.
        config: Validated configuration (overrides already applied).
        workers: Thread count for the Monte Carlo stages.

    Returns:
        The run report.

    Raises:
        ConfigError: If the configuration cannot drive the requested stages.
        NumericalFailureError: If a stage fails numerically; ``stage`` names it.
    """
    names, skipped = stages_for(subcommand, config)
    writer = ArtifactWriter(_resolve_out(config.output.dir))
    report = RunReport(subcommand, config.mc.seed, workers, config.model_dump(mode="json"), skipped=skipped)
    for name in skipped:
        logger.warning("Skipping stage '{}': it needs a stop-below problem", name)
    start = time.perf_counter()
    ctx = PipelineContext(config, writer, workers)
    for name in names:
        logger.info("Stage '{}' started", name)
        t0 = time.perf_counter()
        try:
            result = STAGES[name](ctx)
        except NumericalFailureError as e:
            if e.stage is None:
                e.stage = name
            raise
        report.stages[name] = result
        logger.info("Stage '{}' finished in {:.1f}s: {}", name, time.perf_counter() - t0, result.verdict)
    report.wall_clock_s = time.perf_counter() - start
    writer.write_yaml("run_report.yaml", report.to_dict())
    return report


def _resolve_out(out_dir: str) -> Path:
    path = Path(out_dir)
    return path if path.is_absolute() else Path(ROOT_DIR) / path


def run(
    subcommand: str,
    config_path: Union[str, Path],
    out: Optional[str] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> int:
    """Parses the config, runs the subcommand and returns the exit code.

    Exit codes: 0 when every verdict passes, 1 on a FAIL verdict, 2 on configuration errors,
    3 on numerical failures.
    """
    try:
        config = with_overrides(parse_config(config_path), seed=seed, out=out)
        report = execute(subcommand, config, workers)
    except (ConfigError, DomainError) as e:
        logger.error("Configuration error: {}", e)
        return EXIT_CONFIG
    except NumericalFailureError as e:
        logger.error("Numerical failure in stage '{}': {}", e.stage or "unknown", e)
        return EXIT_NUMERICAL
    for name, stage in report.stages.items():
        failed = [check for check, verdict in stage.verdicts.items() if verdict == "FAIL"]
        if failed:
            logger.warning("Stage '{}' failed: {}", name, ", ".join(failed))
    logger.info("Overall verdict: {}", report.verdict)
    return EXIT_PASS if report.verdict == "PASS" else EXIT_FAIL
