"""Cluster GARCH: score-driven dynamic block correlation models."""

__version__ = "0.1.0"
