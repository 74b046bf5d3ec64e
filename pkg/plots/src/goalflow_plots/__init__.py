"""Offline figure generation from training metrics CSVs."""

__version__ = "0.1.0"
