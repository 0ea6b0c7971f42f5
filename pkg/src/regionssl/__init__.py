"""Self-supervised facial region representation learning.

Two-branch momentum training with a query-based region heatmap head:
pixel-to-region assignments are balanced with Sinkhorn iterations and
aligned across branches, while global and region-pooled embeddings are
matched across views.
"""

from .config import (AugmentationConfig, DataConfig, EvalConfig, LossConfig,
                     ModelConfig, RunConfig, TrainConfig, resolve_config)
from .errors import CheckpointError, ConfigurationError, DatasetError
from .trainer import Trainer, restore_pair

__all__ = [
    "AugmentationConfig", "DataConfig", "EvalConfig", "LossConfig",
    "ModelConfig", "RunConfig", "TrainConfig", "resolve_config",
    "CheckpointError", "ConfigurationError", "DatasetError",
    "Trainer", "restore_pair",
]

__version__ = "0.1.0"
