"""Numerical laboratory for free boundaries of one-dimensional optimal stopping problems."""

__version__ = "0.1.0"
