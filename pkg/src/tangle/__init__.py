"""Slide/expression contrastive pretraining with ABMIL slide encoders."""

from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, InputError, MetricError,
                     NumericalError, ParameterError, ParseError, TangleError, TrainingError)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "FormatError", "InputError", "MetricError",
    "NumericalError", "ParameterError", "ParseError", "TangleError", "TrainingError", "__version__",
]
