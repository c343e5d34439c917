"""Guided-Backpropagation input variants for the detector's second stream."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module
from .vit import ModelShape, ViTEncoder, gap


class ViTProbe(Module):
    """Small fixed ViT whose guided gradients produce the saliency stream."""

    def __init__(self, shape: ModelShape, image_shape: tuple, classes: int, rng: np.random.Generator):
        self.encoder = ViTEncoder(shape, image_shape, rng)
        self.head = Linear(shape.hidden, classes, rng)
        self.freeze()

    def forward(self, images) -> Tensor:
        return self.head(gap(self.encoder(images)))


@dataclass
class Saliency:
    x_prime: np.ndarray
    degenerate: np.ndarray  # per-image flag: constant gradient, filled with 0.5


def guided_backprop(model, x, target="top1") -> Saliency:
    """Guided gradient of the selected logit w.r.t. ``x``, min-max scaled per image.

    ``target`` is ``"top1"`` (the model's predicted class) or a class index /
    per-image array of indices.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    xt = Tensor(batch, requires_grad=True, dtype=batch.dtype if batch.dtype.kind == "f" else None)
    logits = model(xt)
    if isinstance(target, str):
        if target != "top1":
            raise ValueError(f"unknown target rule {target!r}")
        cls = np.argmax(logits.data, axis=-1)
    else:
        cls = np.broadcast_to(np.asarray(target, dtype=np.int64), (batch.shape[0],))
    selected = logits[np.arange(batch.shape[0]), cls].sum()
    (g,) = ag.grad(selected, [xt], mode="guided")
    g = g.astype(np.float64)
    flat = g.reshape(len(g), -1)
    lo, hi = flat.min(axis=1), flat.max(axis=1)
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    out = (flat - lo[:, None]) / safe[:, None]
    out[degenerate] = 0.5
    out = np.clip(out, 0.0, 1.0).reshape(batch.shape).astype(np.float32)
    if single:
        return Saliency(out[0], degenerate[:1])
    return Saliency(out, degenerate)
