"""
File: paths.py
Description: This module defines the file paths used in the project.
Author: free-boundary-lab developers
Date: 17/10/2026
"""

import os

ROOT_DIR = os.path.dirname(
    os.path.dirname(
        os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    )
)

SRC_DIR = os.path.join(ROOT_DIR, "src")
CONFIG_DIR = os.path.join(SRC_DIR, "config")
APP_CONFIG_FPATH = os.path.join(CONFIG_DIR, "config.yaml")

ENV_FPATH = os.path.join(ROOT_DIR, ".env")
