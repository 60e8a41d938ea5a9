"""Forecasting lab: recursive residual decomposition into linear and nonlinear patterns."""

__version__ = "0.1.0"
