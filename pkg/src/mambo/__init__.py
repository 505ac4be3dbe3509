"""Bayesian optimization with an aggregated ensemble of embedded Gaussian processes."""

__version__ = "0.1.0"
