"""Simulation of supercritical branching processes in random environment with
linear-fractional offspring laws, by exact quenched formulas and an
exponential change of measure."""

from .environment import (INTERMEDIATE, OTHER, STRONG, ExternalSampler, FiniteMixture,
                          TiltedEnvironment, calibrate_intermediate, regime_report,
                          sample_env_path)
from .montecarlo import Estimate
from .offspring_law import LinearFractionalLaw
from .quenched import EnvPath, QuenchedLaw, prob_eq, quenched_law

__all__ = [
    "INTERMEDIATE", "OTHER", "STRONG", "Estimate", "EnvPath", "ExternalSampler",
    "FiniteMixture", "LinearFractionalLaw", "QuenchedLaw", "TiltedEnvironment",
    "calibrate_intermediate", "prob_eq", "quenched_law", "regime_report", "sample_env_path",
]
