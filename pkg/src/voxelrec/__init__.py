"""Single-image and video voxel reconstruction with a disentangled graphics code."""

from .estimator import VolumeReconstructor
from .model import Model, NetworkConfig, load_weights, save_weights
from .train import TrainConfig, train

__all__ = ["Model", "NetworkConfig", "TrainConfig", "VolumeReconstructor", "load_weights", "save_weights", "train"]
__version__ = "0.1.0"
