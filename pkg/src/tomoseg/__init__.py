"""Layer-surface regression on tomographic image sequences.

A small numpy autodiff engine drives a multi-task 3D convolutional network
and column-wise GRUs that predict, for every column of every slice, the row
of each material boundary.
"""

from .autodiff import Tensor, no_grad
from .data import GenParams, TomoSequence, generate_sequence
from .evaluation import EvalReport, mean_column_error
from .models import MODES, CombinedModel, ModelConfig, SurfaceGrid
from .training import Adam, Schedule, fit

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CombinedModel",
    "EvalReport",
    "GenParams",
    "MODES",
    "ModelConfig",
    "Schedule",
    "SurfaceGrid",
    "Tensor",
    "TomoSequence",
    "fit",
    "generate_sequence",
    "mean_column_error",
    "no_grad",
]
