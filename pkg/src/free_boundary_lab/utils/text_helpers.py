"""
File: text_helpers.py
Description: Provides text utility functions for the human-readable reports: number
    formatting, aligned tables and verdict summaries.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

import math
from typing import Dict, Iterable, List, Sequence

SCHEMA_VERSION = "1"


def format_number(value: object) -> str:
    """
    Formats a cell value with full round-trip precision.

    Floats are printed with 17 significant digits so that a re-read value is bit-identical;
    everything else goes through ``str``.

    Args:
        value: Number, string or None.

    Returns:
        str: Text of the cell.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.17g}"
    return str(value)


def _short(value: object) -> str:
    if isinstance(value, float) and math.isfinite(value):
        return f"{value:.6g}"
    return format_number(value)


def format_table(headers: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """
    Renders rows as a left-aligned text table with a dashed rule under the header.

    Args:
        headers: Column titles.
        rows: Cell values; floats are shortened to 6 significant digits.

    Returns:
        str: The table, one line per row.
    """
    cells: List[List[str]] = [list(headers)] + [[_short(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def verdicts_to_string(verdicts: Dict[str, str]) -> str:
    """
    Converts a mapping of check names to verdicts into a readable summary block.

    Args:
        verdicts: Check name -> PASS, FAIL or INFO.

    Returns:
        str: One line per check followed by the overall verdict (INFO rows do not count).
    """
    content = [f"{name}: {verdict}" for name, verdict in verdicts.items()]
    overall = "PASS" if all(v != "FAIL" for v in verdicts.values()) else "FAIL"
    content.append("=" * 40)
    content.append(f"overall: {overall}")
    return "\n".join(content)


def report_header(title: str) -> str:
    """First lines of every text report: the title and the schema version line."""
    return f"{title}\nschema_version: {SCHEMA_VERSION}\n"
