"""Nonlinear double stochastic model of financial return: simulation and statistics."""

from .errors import ConfigError, DataError, DomainError, RetssimError, ThresholdError
from .qgaussian import QGaussian
from .sde import ModelParams, Trajectory, simulate, simulate_steps
from .stats import HistogramEstimate, SpectrumEstimate, pdf_estimate, psd_estimate, slope_fit
from .synth import ReturnSeries, generate_returns, normalize

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DomainError", "RetssimError", "ThresholdError",
    "QGaussian", "ModelParams", "Trajectory", "simulate", "simulate_steps",
    "HistogramEstimate", "SpectrumEstimate", "pdf_estimate", "psd_estimate", "slope_fit",
    "ReturnSeries", "generate_returns", "normalize",
]
