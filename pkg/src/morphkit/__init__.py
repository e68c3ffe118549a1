"""Differentiable morphological layers and networks in plain numpy."""

__version__ = "0.1.0"

from .grid import DomainError, WindowShape, mse, taxicab, window_at
from .soft import (ErosionVariant, Form, Kind, MorphMode, SmoothSign, StructuringElement, hard_morph, smooth_sign,
                   soft_morph, soft_morph_grad)
from .layers import (LayerSpec, NetworkSpec, build_adaptive, build_residual_mnn, build_stacked, init_states,
                     load_model, network_backward, network_forward, save_model)
from .training import TrainConfig, TrainReport, TrainingDiverged, decide_operation, finite_diff_check, train

__all__ = [
    "DomainError", "WindowShape", "mse", "taxicab", "window_at",
    "ErosionVariant", "Form", "Kind", "MorphMode", "SmoothSign", "StructuringElement", "hard_morph", "smooth_sign",
    "soft_morph", "soft_morph_grad",
    "LayerSpec", "NetworkSpec", "build_adaptive", "build_residual_mnn", "build_stacked", "init_states",
    "load_model", "network_backward", "network_forward", "save_model",
    "TrainConfig", "TrainReport", "TrainingDiverged", "decide_operation", "finite_diff_check", "train",
]
