"""Koopman forecasting with learned spectral disentanglement and data assimilation."""

__version__ = "0.1.0"
