"""
File: artifacts.py
Description: Writer for the run artifacts: CSV tables with a fixed column order, text
    reports and the YAML run report, all under one output directory.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

import csv
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np
import yaml
from loguru import logger

from free_boundary_lab.core.pde_solver import ValueSurface
from free_boundary_lab.utils.text_helpers import format_number

SURFACE_COLUMNS = ("t", "x", "v", "u")
BOUNDARY_COLUMNS = ("t", "b", "b_dot_fd")
CHECK_COLUMNS = ("check", "value", "threshold", "verdict")
LAMBDA_COLUMNS = (
    "t", "V1plusV2", "se", "intVs", "se", "Lambda", "bdot_formula", "bdot_fd", "abs_diff", "tolerance", "verdict",
)
EXPANSION_COLUMNS = ("t", "h", "w_dot", "ratio")
VH_COLUMNS = ("t", "h", "Vh", "se", "w_dot_solver", "abs_diff", "tolerance", "p_B1", "p_B2", "verdict")
STEFAN_COLUMNS = ("condition", "ident", "residual", "budget", "verdict")


class ArtifactWriter:
    """Writes every artifact of a run into ``out_dir`` and remembers what was written."""

    def __init__(self, out_dir: Union[str, Path]):
        """
        Creates the output directory if needed.

        Args:
            out_dir: Directory receiving the artifacts.
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def _path(self, name: str) -> Path:
        self.written.append(name)
        return self.out_dir / name

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
        """
        Writes a CSV table; floats keep 17 significant digits.

        Args:
            name: File name inside the output directory.
            columns: Header, in the public column order.
            rows: Row values in the same order.

        Returns:
            Path: Location of the file.
        """
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_number(_plain(v)) for v in row])
        logger.info("Wrote {}", path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self._path(name)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        logger.info("Wrote {}", path)
        return path

    def write_yaml(self, name: str, data: dict) -> Path:
        path = self._path(name)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f, sort_keys=False)
        logger.info("Wrote {}", path)
        return path

    def write_surface(self, surface: ValueSurface) -> Path:
        """surface.csv: one row per grid node, time-major."""
        grid = surface.grid
        T, X = np.meshgrid(grid.t_nodes, grid.x_nodes, indexing="ij")
        rows = zip(T.ravel(), X.ravel(), surface.v.ravel(), surface.u.ravel())
        return self.write_csv("surface.csv", SURFACE_COLUMNS, rows)

    def write_boundary(self, surface: ValueSurface) -> Path:
        """boundary.csv: b and its smoothed slope per time slice (NaN where undefined)."""
        b = surface.require("b")
        b_dot = surface.require("b_dot_fd")
        return self.write_csv("boundary.csv", BOUNDARY_COLUMNS, zip(surface.grid.t_nodes, b, b_dot))


def _plain(value: object) -> object:
    """numpy scalars as Python scalars, so formatting is uniform."""
    if isinstance(value, np.generic):
        return value.item()
    return value
