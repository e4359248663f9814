"""Recurrent cells with grouped distributor gates, trained by exact BPTT in numpy."""

from .cells import CellConfig, CellState, GroupSpec, distributor, init_params, model_param_count, param_count, step
from .errors import ConfigurationError, GDUError, IngestionError, NumericFault, ValidationError

__version__ = "0.1.0"

__all__ = [
    "CellConfig", "CellState", "GroupSpec", "distributor", "init_params", "model_param_count", "param_count",
    "step", "ConfigurationError", "GDUError", "IngestionError", "NumericFault", "ValidationError", "__version__",
]
