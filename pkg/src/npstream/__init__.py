"""Streaming transformer neural processes on a small numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .models import FAMILIES, GaussianPrediction, ModelConfig, TaskBatch, build_model
from .streaming import StreamSession, open_session
from .training import TrainConfig, train

__all__ = [
    "FAMILIES",
    "GaussianPrediction",
    "ModelConfig",
    "StreamSession",
    "TaskBatch",
    "TrainConfig",
    "build_model",
    "load_checkpoint",
    "open_session",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
