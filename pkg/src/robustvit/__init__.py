"""Adversarially robust ViT: saliency-guided detector plus dual-encoder masked classifier."""
from .config import ConfigError, TrainConfig, load_config
from .model import RobustViT

__all__ = ["ConfigError", "RobustViT", "TrainConfig", "load_config"]
__version__ = "0.1.0"
