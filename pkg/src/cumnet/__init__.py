"""Cumulative training with function-preserving network morphs."""

__version__ = "0.1.0"
