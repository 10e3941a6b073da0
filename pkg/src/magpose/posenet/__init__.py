from .checkpoint import Checkpoint, Scaling, load_checkpoint, read_checkpoint_header, save_checkpoint
from .model import (
    DEFAULT_STAGES,
    IRAB,
    PUBLISHED_FLOPS,
    PUBLISHED_PARAMETER_COUNT,
    MobilePosenet,
    ModelConfig,
    build_model,
    expected_parameter_count,
)
from .training import PosePredictor, TrainConfig, pose_loss, predict_pose, scaling_for, train, validation_metrics

__all__ = [
    "Checkpoint",
    "DEFAULT_STAGES",
    "IRAB",
    "MobilePosenet",
    "ModelConfig",
    "PUBLISHED_FLOPS",
    "PUBLISHED_PARAMETER_COUNT",
    "PosePredictor",
    "Scaling",
    "TrainConfig",
    "build_model",
    "expected_parameter_count",
    "load_checkpoint",
    "pose_loss",
    "predict_pose",
    "read_checkpoint_header",
    "save_checkpoint",
    "scaling_for",
    "train",
    "validation_metrics",
]
