"""Variational Bayesian image restoration.

Joint estimation of an image, optionally its blur kernel, hidden class
labels and all hyperparameters by coordinate ascent on the free energy.
"""

from .core import ModelSpec, Priors, RunResult, TraceRow, free_energy, run, select_model
from .errors import (ConfigError, ConvergenceError, DimensionError, FamilyMismatchError,
                     InvalidStateError, PriorError, SingularSystemError, VBRestoreError)
from .operators import ConvKernel, DiffOperator, convolve, correlate

__all__ = [
    "ModelSpec", "Priors", "RunResult", "TraceRow", "free_energy", "run", "select_model",
    "ConvKernel", "DiffOperator", "convolve", "correlate",
    "VBRestoreError", "DimensionError", "SingularSystemError", "ConvergenceError",
    "FamilyMismatchError", "InvalidStateError", "PriorError", "ConfigError",
]
__version__ = "0.1.0"
