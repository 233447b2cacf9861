"""Exact simulation and limit laws for mutant invasion in birth-death populations."""
from .errors import (
    ConfigError,
    EmptySample,
    InsufficientSurvivors,
    InvasimError,
    InvasionFails,
    NoEquilibrium,
    NoPeak,
    StepFailure,
)
from .model import Family, ModelSpec, derive, validate
from .rng import SeedSpec

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptySample",
    "Family",
    "InsufficientSurvivors",
    "InvasimError",
    "InvasionFails",
    "ModelSpec",
    "NoEquilibrium",
    "NoPeak",
    "SeedSpec",
    "StepFailure",
    "derive",
    "validate",
]
