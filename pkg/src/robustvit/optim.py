"""AdamW and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: effective lr = base_lr * batch / 256."""
    return base_lr * batch_size / 256


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, peak_lr: float,
                  min_lr: float = 0.0) -> float:
    """Learning rate for 0-indexed ``step``.

    Linear warmup gives ``peak_lr * (step + 1) / warmup_steps``; afterwards a
    half-cosine decays to ``min_lr`` at the last step.
    """
    if total_steps <= 0:
        return 0.0
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    decay_steps = max(total_steps - warmup_steps - 1, 1)
    progress = min((step - warmup_steps) / decay_steps, 1.0)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over named parameters.

    Parameters whose name ends in ``pos`` or ``mask_token`` and all vectors
    (biases, norm gains) are excluded from weight decay.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.decay = [
            p.data.ndim >= 2 and not name.endswith(("pos", "mask_token"))
            for name, p in self.params
        ]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            if lr == 0:
                continue
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.decay[i]:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
