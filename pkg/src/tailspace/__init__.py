"""Activation-space tail-eigenvector initialization for low-rank adapters, at desk scale."""

__version__ = "0.1.0"

from .adapter import InitStrategy, initialize, merge
from .analysis import effective_rank, spectral_report
from .calibration import CalibrationSet, calibrate_model
from .linalg import sym_eigh, thin_svd
from .model import LinearSpec, ToyModel
from .train import TrainConfig, run_training

__all__ = [
    "CalibrationSet",
    "InitStrategy",
    "LinearSpec",
    "ToyModel",
    "TrainConfig",
    "calibrate_model",
    "effective_rank",
    "initialize",
    "merge",
    "run_training",
    "spectral_report",
    "sym_eigh",
    "thin_svd",
]
