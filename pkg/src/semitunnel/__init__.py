"""Numerical laboratory for semiclassical tunneling in H = hbar^2 L + hbar W + V."""

__version__ = "0.1.0"
