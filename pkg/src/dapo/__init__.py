"""Defect-aware prompt optimisation on a toy dual-encoder backbone."""

__version__ = "0.1.0"
