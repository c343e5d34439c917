"""Training loops: detector, masked pretraining, head fine-tuning and a clean baseline."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .adversarial import AdvConfig, fgsm_ll
from .classifier import ensemble_logits, pretrain_loss, sample_masks
from .config import TrainConfig
from .data import ImageBatch, augment
from .detector import detection_batch, detector_loss
from .model import RobustViT
from .nn import Module
from .optim import AdamW, scaled_lr, warmup_cosine
from .vit import ViTClassifier

log = logging.getLogger(__name__)


class NumericDivergence(RuntimeError):
    """A loss became NaN or infinite."""


class FrozenWeightsMutated(RuntimeError):
    """A parameter that should be frozen changed during fine-tuning."""


@dataclass
class TrainingLog:
    """Rows of ``(epoch, split, metric, value)``."""

    rows: list = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((epoch, split, metric, float(value)))

    def extend(self, other: "TrainingLog") -> None:
        self.rows.extend(other.rows)

    def series(self, metric: str, split: str = "train") -> list[float]:
        return [v for _, s, m, v in self.rows if m == metric and s == split]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "split", "metric", "value"])
            for epoch, split, metric, value in self.rows:
                writer.writerow([epoch, split, metric, repr(value)])


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericDivergence(f"{what} became {value} in epoch {epoch}")


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return max(n // batch_size, 1) if n else 0


def _batches(data: ImageBatch, batch_size: int, seed: int, epoch: int):
    if len(data) < batch_size:
        yield from data.batches(len(data), seed, epoch)
    else:
        yield from data.batches(batch_size, seed, epoch, drop_last=True)


def _optimizer(named, cfg: TrainConfig) -> AdamW:
    return AdamW(named, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def _peak(cfg: TrainConfig, base: float, batch: int) -> float:
    return scaled_lr(base, batch) if cfg.scale_lr_by_batch else base


def _ll_config(cfg: TrainConfig) -> AdvConfig:
    return AdvConfig(epsilon=cfg.epsilon, targeted=True, descend_to_target=cfg.descend_to_target)


def train_detector(model: RobustViT, data: ImageBatch, cfg: TrainConfig | None = None,
                   epochs: int | None = None) -> TrainingLog:
    """Train the detector on B clean + B least-likely FGSM images per step.

    Adversarial halves are regenerated every step against the fixed probe.
    Returns per-epoch mean CE, SNN and training detection accuracy.
    """
    cfg = cfg or model.cfg
    epochs = cfg.det_epochs if epochs is None else epochs
    det = model.detector
    rng = np.random.default_rng([cfg.seed, 101])
    opt = _optimizer(det.named_parameters(), cfg)
    batch = min(cfg.batch_size, len(data))
    steps = _steps_per_epoch(len(data), batch)
    peak = _peak(cfg, cfg.det_lr, batch)
    history = TrainingLog()
    step = 0
    for epoch in range(epochs):
        ce_sum = snn_sum = correct = seen = 0.0
        for mb in _batches(data, batch, cfg.seed, epoch):
            adv = fgsm_ll(model.probe, mb.x, _ll_config(cfg), rng).x_adv
            x, y_det = detection_batch(mb.x, adv)
            x_prime = model.saliency(x) if det.uses_saliency else None
            logits, z = det(x, x_prime)
            loss, ce, snn = detector_loss(logits, z, y_det, cfg.lam, cfg.tau_snn)
            _check_finite(float(loss.data), "detector loss", epoch)
            opt.zero_grad()
            ag.backward(loss)
            opt.step(warmup_cosine(step, epochs * steps, cfg.det_warmup * steps, peak))
            step += 1
            ce_sum += ce
            snn_sum += snn
            correct += float(((np.argmax(logits.data, axis=1) == 1) == (y_det > 0)).sum())
            seen += len(y_det)
        n_steps = max(steps, 1)
        history.add(epoch, "train", "ce", ce_sum / n_steps)
        history.add(epoch, "train", "snn", snn_sum / n_steps)
        history.add(epoch, "train", "det_acc", correct / max(seen, 1))
        log.info("detector epoch %d: ce=%.4f snn=%.4f acc=%.3f", epoch, ce_sum / n_steps,
                 snn_sum / n_steps, correct / max(seen, 1))
    return history


def pretrain_backbone(model: RobustViT, data: ImageBatch, cfg: TrainConfig | None = None,
                      epochs: int | None = None) -> TrainingLog:
    """Masked reconstruction + contrastive pretraining of both encoders and the decoder."""
    cfg = cfg or model.cfg
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    cls = model.classifier
    rng = np.random.default_rng([cfg.seed, 202])
    opt = _optimizer(cls.backbone_parameters(), cfg)
    batch = min(cfg.batch_size, len(data))
    steps = _steps_per_epoch(len(data), batch)
    peak = _peak(cfg, cfg.pretrain_lr, batch)
    history = TrainingLog()
    step = 0
    for epoch in range(epochs):
        sums = np.zeros(4)
        for mb in _batches(data, batch, cfg.seed, epoch):
            x_adv = fgsm_ll(model.probe, mb.x, _ll_config(cfg), rng).x_adv
            x_cln = augment(mb.x, rng, cfg.crop_pad)
            visible = sample_masks(len(mb), cls.num_patches, cfg.mask_ratio_pretrain, rng)
            parts = pretrain_loss(cls, x_cln, x_adv, visible, cfg.omega, cfg.tau_cl, cfg.rec_target)
            _check_finite(float(parts.loss.data), "pretraining loss", epoch)
            opt.zero_grad()
            ag.backward(parts.loss)
            opt.step(warmup_cosine(step, epochs * steps, cfg.pretrain_warmup * steps, peak))
            step += 1
            sums += [float(parts.loss.data), parts.rec_clean, parts.rec_adv, parts.contrastive]
        means = sums / max(steps, 1)
        for name, value in zip(("loss", "rec_clean", "rec_adv", "cl"), means):
            history.add(epoch, "train", name, value)
        log.info("pretrain epoch %d: loss=%.4f rec=%.4f/%.4f cl=%.4f", epoch, *means)
    return history


def pretrain(model: RobustViT, data: ImageBatch, cfg: TrainConfig | None = None) -> TrainingLog:
    """Pretraining stage: detector and classifier backbone.

    The two share no parameters and draw from separate random streams, so they
    are run one after the other.
    """
    history = TrainingLog()
    det_log = train_detector(model, data, cfg)
    history.rows += [(e, "detector", m, v) for e, _, m, v in det_log.rows]
    history.extend(pretrain_backbone(model, data, cfg))
    return history


def frozen_modules(model: RobustViT) -> list[Module]:
    cls = model.classifier
    return [model.probe, model.detector, cls.clean_encoder, cls.adv_encoder, cls.decoder]


def frozen_fingerprint(model: RobustViT) -> str:
    parts = [m.fingerprint() for m in frozen_modules(model)]
    parts.append(Module.fingerprint(_Wrap(model.classifier.mask_token)))
    return "/".join(parts)


class _Wrap(Module):
    def __init__(self, tensor):
        self.tensor = tensor


def finetune(model: RobustViT, data: ImageBatch, cfg: TrainConfig | None = None,
             epochs: int | None = None) -> TrainingLog:
    """Train the MLP head on clean + least-likely FGSM images; everything else frozen.

    Every step draws two independent masks per image; the adversarial half is
    generated against the frozen composite with the same masks. The frozen
    weights are hashed after every epoch.
    """
    cfg = cfg or model.cfg
    epochs = cfg.finetune_epochs if epochs is None else epochs
    cls = model.classifier
    saved = [(p, p.requires_grad) for m in frozen_modules(model) for p in m.parameters()]
    saved.append((cls.mask_token, cls.mask_token.requires_grad))
    for m in frozen_modules(model):
        m.freeze()
    cls.mask_token.requires_grad = False
    cls.head.unfreeze()
    reference = frozen_fingerprint(model)
    rng = np.random.default_rng([cfg.seed, 303])
    opt = _optimizer(cls.head.named_parameters("head."), cfg)
    batch = min(cfg.batch_size, len(data))
    steps = _steps_per_epoch(len(data), batch)
    peak = _peak(cfg, cfg.finetune_lr, batch)
    history = TrainingLog()
    m_patches = cls.num_patches
    step = 0
    try:
        for epoch in range(epochs):
            ce_sum = correct = seen = 0.0
            for mb in _batches(data, batch, cfg.seed, epoch):
                n = len(mb)
                vc = sample_masks(n, m_patches, cfg.mask_ratio_finetune, rng)
                va = sample_masks(n, m_patches, cfg.mask_ratio_finetune, rng)
                surface = model.attack_surface(vc, va)
                x_adv = fgsm_ll(surface, mb.x, _ll_config(cfg), rng).x_adv
                x = np.concatenate([mb.x, x_adv])
                y = np.concatenate([mb.y, mb.y])
                vc2, va2 = np.concatenate([vc, vc]), np.concatenate([va, va])
                if cfg.ensemble == "average":
                    p = np.full(2 * n, 0.5)
                else:
                    p = np.concatenate([model.clean_probability(mb.x), model.clean_probability(x_adv)])
                logits = ensemble_logits(cls, x, vc2, va2, p)
                loss = ag.cross_entropy_logits(logits, y)
                _check_finite(float(loss.data), "fine-tuning loss", epoch)
                opt.zero_grad()
                ag.backward(loss)
                opt.step(warmup_cosine(step, epochs * steps, cfg.finetune_warmup * steps, peak))
                step += 1
                ce_sum += float(loss.data)
                correct += float((np.argmax(logits.data, axis=1) == y).sum())
                seen += len(y)
            if frozen_fingerprint(model) != reference:
                raise FrozenWeightsMutated(f"frozen weights changed during fine-tuning epoch {epoch}")
            history.add(epoch, "train", "ce", ce_sum / max(steps, 1))
            history.add(epoch, "train", "acc", correct / max(seen, 1))
            log.info("finetune epoch %d: ce=%.4f acc=%.3f", epoch, ce_sum / max(steps, 1),
                     correct / max(seen, 1))
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    return history


def train_baseline(cfg: TrainConfig, data: ImageBatch, image_shape: tuple, classes: int,
                   epochs: int | None = None, lr: float | None = None) -> tuple[ViTClassifier, TrainingLog]:
    """Plain ViT (clean-encoder shape) trained end to end on clean images only."""
    epochs = cfg.pretrain_epochs + cfg.finetune_epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 404])
    model = ViTClassifier(cfg.encoder_shape, image_shape, classes, rng)
    opt = _optimizer(model.named_parameters(), cfg)
    batch = min(cfg.batch_size, len(data))
    steps = _steps_per_epoch(len(data), batch)
    peak = _peak(cfg, cfg.finetune_lr if lr is None else lr, batch)
    history = TrainingLog()
    step = 0
    for epoch in range(epochs):
        ce_sum = correct = seen = 0.0
        for mb in _batches(data, batch, cfg.seed, epoch):
            logits = model(mb.x)
            loss = ag.cross_entropy_logits(logits, mb.y)
            _check_finite(float(loss.data), "baseline loss", epoch)
            opt.zero_grad()
            ag.backward(loss)
            opt.step(warmup_cosine(step, epochs * steps, cfg.finetune_warmup * steps, peak))
            step += 1
            ce_sum += float(loss.data)
            correct += float((np.argmax(logits.data, axis=1) == mb.y).sum())
            seen += len(mb)
        history.add(epoch, "train", "ce", ce_sum / max(steps, 1))
        history.add(epoch, "train", "acc", correct / max(seen, 1))
    return model, history
