"""Partition-of-unity mixtures of operator-regression experts for field data."""
from .spectral import GridSpec, Field
from .model import POUModel, KnownSolver, build_model
from .training import TrainConfig, fit

__version__ = "0.1.0"
__all__ = ["GridSpec", "Field", "POUModel", "KnownSolver", "build_model", "TrainConfig", "fit"]
