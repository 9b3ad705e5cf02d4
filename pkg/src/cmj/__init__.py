"""Supercritical Crump-Mode-Jagers processes: simulation, spectral analysis and CLT checks."""

__version__ = "0.1.0"
