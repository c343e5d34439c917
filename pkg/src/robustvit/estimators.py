"""scikit-learn style wrappers around the training pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig, load_config
from .data import ImageBatch
from .model import RobustViT
from .saliency import ViTProbe, guided_backprop
from .training import finetune, pretrain


def check_images(X, patch: int | None = None) -> np.ndarray:
    """Coerce to float32 (N, H, W, C) in [0, 1]; (N, H, W) gains a channel axis."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W[, C]), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    if patch is not None and (X.shape[1] % patch or X.shape[2] % patch):
        raise ValueError(f"image size {X.shape[1]}x{X.shape[2]} is not divisible by patch {patch}")
    return X


def check_image_labels(X, y, patch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, patch)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"need one label per image, got {y.shape} for {len(X)} images")
    return X, y


def resolve_config(config, **overrides) -> TrainConfig:
    if config is None:
        cfg = TrainConfig()
    elif isinstance(config, TrainConfig):
        cfg = config
    elif isinstance(config, dict):
        cfg = TrainConfig.from_dict(config)
    else:
        cfg = load_config(config)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg.validate()


class RobustViTClassifier(ClassifierMixin, BaseEstimator):
    """Detector + dual-encoder classifier trained by ``fit`` (pretraining then head fine-tuning).

    ``config`` is a config path, dict or TrainConfig; ``seed``, ``mask_ratio``
    and ``ensemble`` override the matching fields.
    """

    def __init__(self, config=None, seed=None, mask_ratio=None, ensemble=None):
        self.config = config
        self.seed = seed
        self.mask_ratio = mask_ratio
        self.ensemble = ensemble

    def _cfg(self) -> TrainConfig:
        return resolve_config(self.config, seed=self.seed, mask_ratio_finetune=self.mask_ratio,
                              ensemble=self.ensemble)

    def fit(self, X, y):
        cfg = self._cfg()
        X, y = check_image_labels(X, y, cfg.patch)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = ImageBatch(X, codes)
        self.model_ = RobustViT(cfg, X.shape[1:], len(self.classes_))
        self.pretrain_log_ = pretrain(self.model_, data, cfg)
        self.finetune_log_ = finetune(self.model_, data, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_images(X, self.model_.cfg.patch))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def detect_proba(self, X) -> np.ndarray:
        """Detector's probability that each image is clean."""
        check_is_fitted(self, "model_")
        return self.model_.clean_probability(check_images(X, self.model_.cfg.patch))


class GuidedBackpropTransformer(TransformerMixin, BaseEstimator):
    """Maps images to min-max scaled guided-backprop saliency of a fixed random ViT probe."""

    def __init__(self, config=None, seed=None, n_classes=2):
        self.config = config
        self.seed = seed
        self.n_classes = n_classes

    def fit(self, X, y=None):
        cfg = resolve_config(self.config, seed=self.seed)
        X = check_images(X, cfg.patch)
        self.probe_ = ViTProbe(cfg.probe_shape, X.shape[1:], self.n_classes,
                               np.random.default_rng([cfg.seed, 0]))
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "probe_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"fitted on images of shape {self.image_shape_}, got {X.shape[1:]}")
        return guided_backprop(self.probe_, X).x_prime
