"""Deterministic FedAvg simulator for non-iid, unbalanced federated data."""
from fedsim.errors import (ConfigError, DatasetFormatError, DimensionError, DivergenceError, FedSimError,
                           NumericError, ScheduleError)
from fedsim.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DatasetFormatError",
    "DimensionError",
    "DivergenceError",
    "FedSimError",
    "NumericError",
    "ScheduleError",
]
