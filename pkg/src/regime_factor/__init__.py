"""High-dimensional factor models with regime-switching loadings, estimated by EM."""

from __future__ import annotations

from .detect import DetectorConfig, TurningPoints, detect_turning_points, moving_average, realtime_detect
from .em_dynamic import fit_dynamic, hamilton_filter, smoother
from .em_static import EMConfig, fit_static
from .model import (
    DegenerateWeightsError,
    DomainError,
    FitFailureError,
    FitResult,
    InvalidInputError,
    MarkovState,
    NumericalUnderflowError,
    Panel,
    ProbSeries,
    RegimeParams,
    StaticState,
    full_markov_loglik,
    mixture_loglik,
    regime_log_density,
)
from .simulate import SimConfig, SimTruth, simulate_panel

__all__ = [
    "DegenerateWeightsError", "DetectorConfig", "DomainError", "EMConfig", "FitFailureError", "FitResult",
    "InvalidInputError", "MarkovState", "NumericalUnderflowError", "Panel", "ProbSeries", "RegimeParams",
    "SimConfig", "SimTruth", "StaticState", "TurningPoints", "detect_turning_points", "fit_dynamic",
    "fit_static", "full_markov_loglik", "hamilton_filter", "mixture_loglik", "moving_average",
    "realtime_detect", "regime_log_density", "simulate_panel", "smoother",
]

__version__ = "0.1.0"
