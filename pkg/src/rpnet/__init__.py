"""Residual pyramid network for single-shot semantic segmentation."""

from .backbone import Backbone, build_backbone, enet_layout
from .data import DatasetSpec, SyntheticSpec, generate_synthetic
from .errors import ConfigError, DataError, DivergenceError, RPNetError, SizeMismatchError
from .metrics import ConfusionMatrix, mean_iou
from .model import RPNet, load_checkpoint, save_checkpoint
from .pyramid import PyramidSpec, reconstruct_targets
from .training import TrainConfig, train

__version__ = "0.1.0"
