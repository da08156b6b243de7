"""Trainer for the registration descriptor network."""

from .arch import param_count, reference_layers, validate_layers
from .augment import (N_ROTATIONS, apply_draw, augment, rotate_cube,
                      rotation_matrices)
from .dataset import (PairDataset, PatchPairRecord, load_dataset, read_pairs,
                      split_dataset)
from .errors import DataError
from .model import (DescriptorNet, build_model, center_descriptor,
                    export_weights, import_weights, predict_pairs)
from .train import (TrainConfig, TrainResult, evaluate_mse, predict_targets,
                    train)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "DescriptorNet",
    "N_ROTATIONS",
    "PairDataset",
    "PatchPairRecord",
    "TrainConfig",
    "TrainResult",
    "apply_draw",
    "augment",
    "build_model",
    "center_descriptor",
    "evaluate_mse",
    "export_weights",
    "import_weights",
    "load_dataset",
    "param_count",
    "predict_pairs",
    "predict_targets",
    "read_pairs",
    "reference_layers",
    "rotate_cube",
    "rotation_matrices",
    "split_dataset",
    "train",
    "validate_layers",
    "__version__",
]
