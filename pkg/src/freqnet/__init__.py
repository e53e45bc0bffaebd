"""Frequency-domain deepfake detection: high-frequency representations,
frequency convolutional layers and a small residual classifier on numpy."""

from .freq import FilterSpec, fcl, hfri, hfrf_channel, hfrf_spatial, highpass_mask
from .model import ModelConfig, build_model, cam, param_count
from .train import TrainConfig, average_precision, evaluate, lr_at

__version__ = "0.1.0"

__all__ = [
    "FilterSpec", "fcl", "hfri", "hfrf_channel", "hfrf_spatial", "highpass_mask",
    "ModelConfig", "build_model", "cam", "param_count",
    "TrainConfig", "average_precision", "evaluate", "lr_at",
]
