"""Calibrated normalization layers and a small segmentation harness on numpy."""

from .autodiff import Tensor, grad_check
from .checkpoint import load, save
from .domains import CORRUPTIONS, DomainSpec
from .harness import (MetricsReport, TrainConfig, TrainingDiverged, evaluate, pretrain,
                      sweep_manual_m, train_instcal)
from .norm import ConvertMode, convert_model
from .segnet import SegNet, SegNetConfig, build, predict

__all__ = [
    "CORRUPTIONS", "ConvertMode", "DomainSpec", "MetricsReport", "SegNet", "SegNetConfig", "Tensor",
    "TrainConfig", "TrainingDiverged", "build", "convert_model", "evaluate", "grad_check", "load",
    "predict", "pretrain", "save", "sweep_manual_m", "train_instcal",
]
__version__ = "0.1.0"
