"""
helpers.py

This module provides utility functions for the project, including:

- Loading and parsing YAML configuration files (duplicate keys rejected).
- Loading environment variables from a .env file and resolving the worker count.
- Configuring the loguru sink.

Author: free-boundary-lab developers
Date: 17/10/2026
"""

import os
import sys
from pathlib import Path
from typing import Optional, Union

import yaml
from dotenv import load_dotenv
from loguru import logger

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.utils.paths import ENV_FPATH

WORKERS_ENV_VAR = "FBL_WORKERS"


class UniqueKeyLoader(yaml.SafeLoader):
    """SafeLoader that refuses a mapping key seen twice in the same mapping."""

    def construct_mapping(self, node, deep=False):
        seen = {}
        for key_node, _ in node.value:
            key = self.construct_object(key_node, deep=deep)
            if key in seen:
                raise ConfigError(
                    f"Duplicate key '{key}' at line {key_node.start_mark.line + 1} "
                    f"(first defined at line {seen[key] + 1})"
                )
            seen[key] = key_node.start_mark.line
        return super().construct_mapping(node, deep=deep)


def load_yaml_config(file_path: Union[str, Path]) -> dict:
    """Loads a YAML configuration file.

    Args:
        file_path: Path to the YAML file.

    Returns:
        Parsed YAML content as a dictionary (empty for an empty file).

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the YAML cannot be parsed, repeats a key or is not a mapping.
        IOError: If there's an error reading the file.
    """
    file_path = Path(file_path)

    # Check if file exists
    if not file_path.exists():
        raise FileNotFoundError(f"YAML config file not found: {file_path}")

    # Read and parse the YAML file
    try:
        with open(file_path, "r", encoding="utf-8") as file:
            content = yaml.load(file, Loader=UniqueKeyLoader)
    except yaml.YAMLError as e:
        raise ConfigError(f"Error parsing YAML file: {e}") from e
    except IOError as e:
        raise IOError(f"Error reading YAML file: {e}") from e

    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f"Top level of {file_path} must be a mapping of sections")
    return content


def load_env() -> None:
    """Loads environment variables from the repository .env file, if there is one."""
    load_dotenv(ENV_FPATH, override=False)


def resolve_workers(flag: Optional[int] = None) -> int:
    """Worker count: the --workers flag, then FBL_WORKERS (after .env), then 1.

    Raises:
        ConfigError: If the resolved value is not a positive integer.
    """
    if flag is not None:
        value, source = flag, "--workers"
    else:
        load_env()
        raw = os.getenv(WORKERS_ENV_VAR)
        if raw is None or not raw.strip():
            return 1
        source = WORKERS_ENV_VAR
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"{WORKERS_ENV_VAR} must be an integer, got '{raw}'") from e
    if value < 1:
        raise ConfigError(f"{source} must be at least 1, got {value}")
    return value


def configure_logging(quiet: bool = False) -> None:
    """Routes loguru to stderr at INFO, or WARNING when quiet."""
    logger.remove()
    logger.add(
        sys.stderr,
        level="WARNING" if quiet else "INFO",
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )
