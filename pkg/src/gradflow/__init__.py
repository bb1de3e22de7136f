"""Gradient-flow samplers: particle systems, Gaussian moment flows and 1D grid flows."""

__version__ = "0.1.0"
