"""Radial numerics for the complex Monge-Ampere Dirichlet problem on the unit ball."""

__version__ = "0.1.0"
