"""Audit LLM stock-return forecasts for extrapolation and miscalibration."""

__version__ = "0.1.0"
