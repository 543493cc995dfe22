"""Dual-pyramid salient object detection with cross-model feature grafting, in numpy."""

from .config import TrainConfig, load_config, parse_config
from .model import GraftNet, build_model
from .tensor import Tensor, no_grad

__all__ = ["GraftNet", "Tensor", "TrainConfig", "build_model", "load_config", "no_grad", "parse_config"]
__version__ = "0.1.0"
