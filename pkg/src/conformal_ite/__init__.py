"""Conformal predictive distributions for individual treatment effects."""
__version__ = "0.1.0"
