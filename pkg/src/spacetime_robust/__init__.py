"""Spacetime-style SSM forecasters under stealthy adversarial attack."""
from .data import RawSeries, Scaler, SeriesWindow, fit_scaler, load_csv, make_windows
from .model import CompanionSSM, ModelConfig, SpacetimeModel, forecast, linearize, ssm_scan

__version__ = "0.1.0"

__all__ = ["RawSeries", "Scaler", "SeriesWindow", "fit_scaler", "load_csv", "make_windows", "CompanionSSM",
           "ModelConfig", "SpacetimeModel", "forecast", "linearize", "ssm_scan"]
