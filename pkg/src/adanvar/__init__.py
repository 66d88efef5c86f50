"""Adaptive nonlinear vector autoregression for chaotic time series."""

__version__ = "0.1.0"
