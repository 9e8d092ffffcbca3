"""Federated importance-weighted ERM under distribution shift."""

__version__ = "0.1.0"
