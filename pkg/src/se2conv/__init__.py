"""SE(2,N) roto-translation equivariant convolutional networks in numpy."""

from .audit import (AuditReport, aligned_prediction_stats, equivariance_error, polar_response,
                    rotate_input)
from .exceptions import ConfigurationError, DataError, NumericalError
from .models import (LayerSpec, Model, ModelConfig, build_model, count_params, load_checkpoint,
                     preset, save_checkpoint)
from .rotation import GroupElement, build_rotation_operator, circular_mask
from .training import TrainConfig, evaluate, synth_dataset, train

__version__ = "0.1.0"

__all__ = [
    "AuditReport", "ConfigurationError", "DataError", "GroupElement", "LayerSpec", "Model",
    "ModelConfig", "NumericalError", "TrainConfig", "aligned_prediction_stats",
    "build_model", "build_rotation_operator", "circular_mask", "count_params",
    "equivariance_error", "evaluate", "load_checkpoint", "polar_response", "preset",
    "rotate_input", "save_checkpoint", "synth_dataset", "train",
]
