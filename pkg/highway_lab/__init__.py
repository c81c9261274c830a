"""Gradient-highway adapter tuning and PETL baselines over a measuring autodiff tape."""

__version__ = "0.1.0"
