"""Uncertainty-aware completion of facial-emotion annotations."""

__version__ = "0.1.0"
