"""Simulation and analytic verification of supercritical multi-type CBI processes."""

from .measures import DiscreteMeasure
from .model import CbiParams, EffectiveParams, InitialLaw, ModelError, NumericalError, effective, validate
from .simulate import SimConfig, simulate_ensemble, simulate_path
from .spectral import EigenPair, left_eigenpair, spectral_summary

__all__ = [
    "CbiParams",
    "DiscreteMeasure",
    "EffectiveParams",
    "EigenPair",
    "InitialLaw",
    "ModelError",
    "NumericalError",
    "SimConfig",
    "effective",
    "left_eigenpair",
    "simulate_ensemble",
    "simulate_path",
    "spectral_summary",
    "validate",
]
