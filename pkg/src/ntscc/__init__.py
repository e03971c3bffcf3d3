"""Contextual variable-rate joint source-channel coding toolkit."""

from .config import (
    AdaptConfig,
    ArchConfig,
    ChannelConfig,
    RateControl,
    RunConfig,
    TrainConfig,
    load_config,
    save_config,
)
from .model import NTSCCModel, TransmissionResult, build_model
from .partition import CheckerboardPartition, build_partition

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ArchConfig",
    "ChannelConfig",
    "CheckerboardPartition",
    "NTSCCModel",
    "RateControl",
    "RunConfig",
    "TrainConfig",
    "TransmissionResult",
    "build_model",
    "build_partition",
    "load_config",
    "save_config",
    "__version__",
]
