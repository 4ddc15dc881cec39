"""Pretest and Stein-type shrinkage estimation for linear quantile regression."""

__version__ = "0.1.0"
