"""Survival analysis tools for high-dimensional covariates."""

__version__ = "0.1.0"
