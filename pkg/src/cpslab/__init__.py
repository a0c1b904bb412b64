"""Desk-scale lab for dual-network pseudo supervision on synthetic
segmentation data: a NumPy reverse-mode autodiff core, a small
encoder-decoder network, competing semi-supervised training methods, and a
deterministic experiment sweep runner.
"""

from .errors import (ArgumentError, ConfigError, CpsLabError, DataError,
                     DimensionError, EvaluationError)
from .methods import MethodKind, TrainConfig, train
from .model import SegNetConfig, build_segnet, init_dual

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ConfigError",
    "CpsLabError",
    "DataError",
    "DimensionError",
    "EvaluationError",
    "MethodKind",
    "SegNetConfig",
    "TrainConfig",
    "build_segnet",
    "init_dual",
    "train",
    "__version__",
]
