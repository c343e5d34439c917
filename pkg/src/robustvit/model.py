"""The full pipeline: saliency probe, detector and dual-encoder classifier."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .classifier import DualEncoderMAE, ensemble_logits, sample_mask
from .config import TrainConfig
from .data import Checkpoint, load_checkpoint, save_checkpoint
from .detector import Detector, clean_probability, detector_forward
from .nn import Module
from .saliency import ViTProbe, guided_backprop


class RobustViT(Module):
    def __init__(self, cfg: TrainConfig, image_shape: tuple, classes: int):
        cfg.validate()
        self.cfg = cfg
        self.image_shape = tuple(int(v) for v in image_shape)
        self.classes = int(classes)
        # one stream per component, so switching a detector variant leaves the others untouched
        rng = [np.random.default_rng([cfg.seed, k]) for k in range(3)]
        self.probe = ViTProbe(cfg.probe_shape, self.image_shape, classes, rng[0])
        self.detector = Detector(cfg.detector_shape, self.image_shape, rng[1], variant=cfg.detector_variant)
        self.classifier = DualEncoderMAE(cfg.encoder_shape, cfg.decoder_shape, self.image_shape, classes, rng[2])

    @property
    def num_patches(self) -> int:
        return self.classifier.num_patches

    # --- detector side -------------------------------------------------
    def saliency(self, x) -> np.ndarray:
        return guided_backprop(self.probe, np.asarray(x)).x_prime

    def clean_probability(self, x) -> np.ndarray:
        return detector_forward(self.detector, x, self.probe).p

    def _p_tensor(self, xt: Tensor, ensemble: str) -> Tensor:
        n = xt.shape[0]
        if ensemble == "average":
            return Tensor(np.full(n, 0.5), dtype=xt.dtype)
        x_prime = self.saliency(xt.data) if self.detector.uses_saliency else None
        logits, _ = self.detector(xt, x_prime)
        return clean_probability(logits)

    # --- classifier side -----------------------------------------------
    def eval_masks(self, n: int, seed: int, ratio: float | None = None):
        """Two fixed masks (clean / adversarial stream) shared by every image of the batch."""
        ratio = self.cfg.mask_ratio_finetune if ratio is None else ratio
        rng = np.random.default_rng([self.cfg.seed, 7919, seed])
        vc = sample_mask(self.num_patches, ratio, rng).visible
        va = sample_mask(self.num_patches, ratio, rng).visible
        return np.broadcast_to(vc, (n, self.num_patches)), np.broadcast_to(va, (n, self.num_patches))

    def logits(self, x, vis_clean, vis_adv, p=None, ensemble: str | None = None) -> Tensor:
        """Classifier logits; ``p`` is taken from the detector unless given.

        With a Tensor input that requires grad the result is differentiable
        through the detector's image stream and both encoders; the saliency
        stream is treated as a constant.
        """
        ensemble = ensemble or self.cfg.ensemble
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if p is None:
            p = self._p_tensor(xt, ensemble)
        return ensemble_logits(self.classifier, xt, vis_clean, vis_adv, p)

    def attack_surface(self, vis_clean, vis_adv, ensemble: str | None = None):
        """Callable ``Tensor -> logits`` for white-box attacks with fixed masks."""
        def fn(xt: Tensor) -> Tensor:
            n = xt.shape[0]
            return self.logits(xt, vis_clean[:n], vis_adv[:n], ensemble=ensemble)
        return fn

    def predict_logits(self, x, seed: int = 0, draws: int | None = None, ensemble: str | None = None,
                       ratio: float | None = None, batch_size: int = 256) -> np.ndarray:
        """Evaluation logits averaged over ``draws`` fixed mask pairs."""
        x = np.asarray(x, dtype=np.float32)
        draws = self.cfg.eval_mask_draws if draws is None else draws
        ensemble = ensemble or self.cfg.ensemble
        out = np.zeros((len(x), self.classes))
        for start in range(0, len(x), batch_size):
            xb = x[start:start + batch_size]
            p = np.full(len(xb), 0.5) if ensemble == "average" else self.clean_probability(xb)
            with ag.no_grad():
                for k in range(draws):
                    vc, va = self.eval_masks(len(xb), seed + k, ratio)
                    out[start:start + len(xb)] += self.logits(xb, vc, va, p=p, ensemble=ensemble).data
        return out / draws

    def predict(self, x, **kwargs) -> np.ndarray:
        return np.argmax(self.predict_logits(x, **kwargs), axis=1)

    # --- persistence ---------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta.update(image_shape=list(self.image_shape), classes=self.classes)
        save_checkpoint(path, self.state_dict(), config=self.cfg.to_dict(), meta=meta)

    @classmethod
    def from_checkpoint(cls, source, **overrides) -> "RobustViT":
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        values = dict(ckpt.config)
        values.update(overrides)
        cfg = TrainConfig.from_dict(values)
        model = cls(cfg, tuple(ckpt.meta["image_shape"]), ckpt.meta["classes"])
        model.load_state_dict(ckpt.tensors)
        return model
