"""Uncertainty and out-of-distribution detection benchmark for ICU-style tabular data."""

__version__ = "0.1.0"
