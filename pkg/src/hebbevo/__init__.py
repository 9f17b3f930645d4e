"""Evolved Hebbian plasticity rules for randomly initialized networks."""

__version__ = "0.1.0"
