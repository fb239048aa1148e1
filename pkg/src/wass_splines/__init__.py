"""Wasserstein spline interpolation and extrapolation solvers."""

__version__ = "0.1.0"
