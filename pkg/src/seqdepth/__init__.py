"""Recurrent convolutional depth estimation from monocular video, built on a small
numpy autodiff engine, with a procedural scene generator and an avoidance simulator."""

from .errors import SeqDepthError
from .estimator import DepthSequenceRegressor
from .network import DepthNet, NetworkConfig, build_network
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "DepthNet",
    "DepthSequenceRegressor",
    "NetworkConfig",
    "SeqDepthError",
    "TrainConfig",
    "build_network",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
