"""Discrete-grid posterior localization of time-varying current dipoles."""

__version__ = "0.1.0"
