"""Lightweight 2D-to-3D human pose lifting with a dual-stream frequency/joint backbone."""

from .errors import (ConfigError, ContractError, CorruptCheckpointError, CorruptDatasetError,
                     DimensionError, NanoHTNetError)
from .model import DESK, FLAGSHIP, LARGE, ModelConfig, flops_count, forward, init_params, param_count

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "CorruptCheckpointError", "CorruptDatasetError",
    "DimensionError", "NanoHTNetError", "DESK", "FLAGSHIP", "LARGE", "ModelConfig", "flops_count",
    "forward", "init_params", "param_count",
]
