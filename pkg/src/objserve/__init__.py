"""Deterministic desk-scale object-as-a-service platform simulation."""

__version__ = "0.1.0"
