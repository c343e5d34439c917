"""l-infinity threat models: FGSM with random start, least-likely FGSM, PGD."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Model = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class AdvConfig:
    """Attack budget. ``step_size`` defaults to ``epsilon`` for one-step attacks
    and ``2.5 * epsilon / steps`` for PGD."""

    epsilon: float = 8 / 255
    steps: int = 1
    step_size: float | None = None
    targeted: bool = False
    random_start: bool = True
    descend_to_target: bool = False

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon if self.steps == 1 else 2.5 * self.epsilon / self.steps


@dataclass
class AdvExample:
    x_adv: np.ndarray
    delta: np.ndarray
    source_label: np.ndarray | None
    target_label: np.ndarray | None = None


def _budget(epsilon: float, dtype) -> np.floating:
    """Largest value of ``dtype`` not exceeding ``epsilon``, so the bound holds exactly."""
    eps = np.asarray(epsilon, dtype=dtype)
    if float(eps) > epsilon:
        eps = np.nextafter(eps, np.asarray(0, dtype=dtype))
    return eps


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Elementwise ``max(min(delta, eps), -eps)``."""
    delta = np.asarray(delta)
    eps = _budget(epsilon, delta.dtype) if delta.dtype.kind == "f" else epsilon
    return np.maximum(np.minimum(delta, eps), -eps)


def least_likely_class(logits: np.ndarray) -> np.ndarray:
    """Index of the minimum logit along the last axis (ties go to the lowest index)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    if logits.shape[-1] < 2:
        raise ValueError("need at least two classes")
    return np.argmin(logits, axis=-1)


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        out = model(Tensor(x, dtype=x.dtype))
    if not isinstance(out, Tensor):
        raise TypeError("model must return a Tensor of logits")
    return out.data


def input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross entropy w.r.t. the input images."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    logits = model(xt)
    if not isinstance(logits, Tensor) or not logits.requires_grad:
        raise TypeError("model output is not differentiable w.r.t. its input")
    loss = ag.cross_entropy_logits(logits, labels, reduction="sum")
    (g,) = ag.grad(loss, [xt])
    return g


def _snap(x: np.ndarray, x_adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Undo float rounding in ``x + delta`` that lands just outside the budget."""
    for _ in range(4):
        over = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)) > epsilon
        if not over.any():
            break
        x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
    return x_adv


def _finish(x, delta, source, target, epsilon: float) -> AdvExample:
    x_adv = _snap(x, np.clip(x + delta, 0, 1).astype(x.dtype), epsilon)
    return AdvExample(x_adv=x_adv, delta=delta, source_label=source, target_label=target)


def _one_step(model, x, labels, cfg, rng, descend):
    x = np.asarray(x, dtype=np.float32) if np.asarray(x).dtype.kind != "f" else np.asarray(x)
    eps = _budget(cfg.epsilon, x.dtype)
    start = np.zeros_like(x)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random start needs an rng")
        start = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    step = np.sign(input_gradient(model, x, labels)).astype(x.dtype)
    if descend:
        step = -step
    delta = start + np.asarray(cfg.alpha, dtype=x.dtype) * step
    return x, project_linf(delta, float(eps))


def fgsm_rs(model: Model, x, y, cfg: AdvConfig, rng: np.random.Generator | None = None) -> AdvExample:
    """FGSM from a uniform random start, projected back into the l-inf ball."""
    if cfg.steps != 1:
        raise ValueError("fgsm_rs is a one-step attack")
    y = np.asarray(y)
    x, delta = _one_step(model, x, y, cfg, rng, descend=False)
    return _finish(x, delta, y, None, cfg.epsilon)


def fgsm_ll(model: Model, x, cfg: AdvConfig, rng: np.random.Generator | None = None,
            source_label=None) -> AdvExample:
    """One-step attack toward each image's least-likely class.

    By default the signed gradient of the loss toward the least-likely label is
    added, exactly like the untargeted step; ``cfg.descend_to_target`` subtracts
    it instead (the conventional targeted step).
    """
    if cfg.steps != 1:
        raise ValueError("fgsm_ll is a one-step attack")
    x = np.asarray(x)
    target = least_likely_class(_logits(model, x))
    x, delta = _one_step(model, x, target, cfg, rng, descend=cfg.descend_to_target)
    source = None if source_label is None else np.asarray(source_label)
    return _finish(x, delta, source, target, cfg.epsilon)


def pgd(model: Model, x, y, cfg: AdvConfig, rng: np.random.Generator | None = None) -> AdvExample:
    """Multi-step signed-gradient ascent with projection after every step."""
    x = np.asarray(x)
    y = np.asarray(y)
    eps = _budget(cfg.epsilon, x.dtype)
    alpha = np.asarray(cfg.alpha, dtype=x.dtype)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random start needs an rng")
        delta = project_linf(rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype), float(eps))
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.steps):
        g = input_gradient(model, np.clip(x + delta, 0, 1).astype(x.dtype), y)
        delta = project_linf(delta + alpha * np.sign(g).astype(x.dtype), float(eps))
    return _finish(x, delta, y, None, cfg.epsilon)


def generate(name: str, model: Model, x, y, epsilon: float, rng: np.random.Generator,
             descend_to_target: bool = False) -> AdvExample:
    """Build an attack by name: ``none``, ``fgsm``, ``fgsm_ll`` or ``pgd-<k>``."""
    x = np.asarray(x)
    if name == "none" or epsilon == 0:
        return AdvExample(x.copy(), np.zeros_like(x), np.asarray(y))
    if name == "fgsm":
        return fgsm_rs(model, x, y, AdvConfig(epsilon=epsilon), rng)
    if name == "fgsm_ll":
        cfg = AdvConfig(epsilon=epsilon, targeted=True, descend_to_target=descend_to_target)
        return fgsm_ll(model, x, cfg, rng, source_label=y)
    if name.startswith("pgd"):
        try:
            steps = int(name.split("-", 1)[1]) if "-" in name else 10
        except ValueError:
            raise ValueError(f"unknown attack {name!r}") from None
        return pgd(model, x, y, AdvConfig(epsilon=epsilon, steps=steps, random_start=False), rng)
    raise ValueError(f"unknown attack {name!r}")
