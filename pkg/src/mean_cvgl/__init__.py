"""Multi-level embedding and alignment network for drone/satellite geo-localization."""

from mean_cvgl.config import (
    BackboneSpec,
    LossWeights,
    ModelConfig,
    TrainConfig,
    ConfigError,
)
from mean_cvgl.model import MEAN, build_model

__all__ = [
    "BackboneSpec",
    "ConfigError",
    "LossWeights",
    "MEAN",
    "ModelConfig",
    "TrainConfig",
    "build_model",
]

__version__ = "0.1.0"
