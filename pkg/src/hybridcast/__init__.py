"""Traffic forecasting by periodic/residual decoupling."""

__version__ = "0.1.0"
