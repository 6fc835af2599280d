"""Kushner-Stratonovich Monte Carlo filtering with annealed inner iterations."""

__version__ = "0.1.0"
