"""Two-stream ViT detector trained with cross entropy plus soft-nearest-neighbour loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, LayerNorm, Linear, Module
from .saliency import guided_backprop
from .vit import ModelShape, PatchEmbed, encoder_forward, gap, make_blocks, patchify

VARIANTS = ("full", "no-gb", "no-msa-bias")


@dataclass
class DetectorOutput:
    p: np.ndarray  # probability each input is clean
    z: np.ndarray  # pooled representation
    logits: np.ndarray


def det_labels_to_classes(y_det) -> np.ndarray:
    """Map detector labels {+1 clean, -1 adversarial} to CE classes {1, 0}."""
    y_det = np.asarray(y_det)
    if not np.isin(y_det, (-1, 1)).all():
        raise ValueError("detector labels must be +1 (clean) or -1 (adversarial)")
    return (y_det > 0).astype(np.int64)


class Detector(Module):
    """Biased-attention ViT over an image and its guided-backprop variant.

    ``variant`` selects the ablations: ``no-gb`` drops the saliency stream and
    uses standard attention; ``no-msa-bias`` adds the two embeddings instead of
    biasing attention.
    """

    def __init__(self, shape: ModelShape, image_shape: tuple, rng: np.random.Generator,
                 variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown detector variant {variant!r}")
        self.variant = variant
        self.patch = shape.patch
        self.embed = PatchEmbed(shape, image_shape, rng)
        c = image_shape[2]
        self.embed_gb = None if variant == "no-gb" else Linear(shape.patch * shape.patch * c, shape.hidden, rng)
        self.blocks = make_blocks(shape, rng, biased=variant == "full")
        self.norm = LayerNorm(shape.hidden)
        self.head = MLP(shape.hidden, shape.hidden, 2, rng)

    @property
    def uses_saliency(self) -> bool:
        return self.variant != "no-gb"

    def encode(self, images, x_prime=None) -> Tensor:
        """Pooled representation z, shape (N, D)."""
        e = self.embed(images)
        e_prime = None
        if self.uses_saliency:
            if x_prime is None:
                raise ValueError("detector needs the guided-backprop variant of its input")
            e_prime = self.embed_gb(Tensor(patchify(np.asarray(x_prime), self.patch))) + self.embed.pos
            if self.variant == "no-msa-bias":
                e, e_prime = e + e_prime, None
        return gap(self.norm(encoder_forward(e, self.blocks, e_prime)))

    def forward(self, images, x_prime=None) -> tuple[Tensor, Tensor]:
        z = self.encode(images, x_prime)
        return self.head(z), z


def clean_probability(logits: Tensor) -> Tensor:
    return ag.softmax(logits)[:, 1]


def detector_forward(detector: Detector, x, probe=None) -> DetectorOutput:
    """Run the detector on raw images, building the saliency stream with ``probe``."""
    x = np.asarray(x)
    x_prime = guided_backprop(probe, x).x_prime if detector.uses_saliency else None
    with ag.no_grad():
        logits, z = detector(x, x_prime)
        probs = ag.softmax(logits).data
    return DetectorOutput(p=probs[:, 1], z=z.data, logits=logits.data)


def _masked_rows(logits: Tensor, keep: np.ndarray) -> Tensor:
    return logits + Tensor(np.where(keep, 0.0, -np.inf), dtype=logits.dtype)


def snn_loss(z: Tensor, y_det, tau: float = 0.5) -> Tensor:
    """Soft-nearest-neighbour loss with cosine distance.

    For anchor i the numerator sums ``exp(-dist(z_i, z_j) / tau)`` over the other
    members of its class and the denominator over every other sample. Anchors
    alone in their class are skipped with a warning.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    y = np.asarray(y_det)
    n = z.shape[0]
    if y.shape != (n,):
        raise ValueError(f"labels of shape {y.shape} do not match {n} representations")
    zn = ag.l2_normalize(z)
    sim = zn @ ag.transpose(zn, (1, 0))
    logits = ag.scale(sim - 1.0, 1.0 / tau)  # -cosine_distance / tau
    others = ~np.eye(n, dtype=bool)
    positives = (y[:, None] == y[None, :]) & others
    valid = positives.any(axis=1)
    if not valid.all():
        warnings.warn(f"snn_loss: skipped {int((~valid).sum())} anchors without positives")
        if not valid.any():
            raise ValueError("snn_loss: no anchor has a positive partner")
    rows = np.flatnonzero(valid)
    kept = logits[rows]
    per_anchor = ag.logsumexp(_masked_rows(kept, others[rows])) - ag.logsumexp(
        _masked_rows(kept, positives[rows])
    )
    return ag.mean(per_anchor)


def detector_loss(logits: Tensor, z: Tensor, y_det, lam: float = 0.15, tau: float = 0.5):
    """``(1 - lam) * CE + lam * SNN``; returns (loss, ce, snn) with the parts as floats."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ce = ag.cross_entropy_logits(logits, det_labels_to_classes(y_det))
    if lam == 0:
        return ce, float(ce.data), float("nan")
    snn = snn_loss(z, y_det, tau)
    if lam == 1:
        return snn, float("nan"), float(snn.data)
    loss = ag.scale(ce, 1 - lam) + ag.scale(snn, lam)
    return loss, float(ce.data), float(snn.data)


def detection_batch(x_clean: np.ndarray, x_adv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack B clean and B adversarial images with labels +1 / -1."""
    if len(x_clean) != len(x_adv):
        raise ValueError("detector batches need equal clean and adversarial halves")
    x = np.concatenate([x_clean, x_adv]).astype(np.float32)
    y = np.concatenate([np.ones(len(x_clean)), -np.ones(len(x_adv))]).astype(np.int64)
    return x, y


def detection_accuracy(detector: Detector, probe, x_clean, x_adv, batch_size: int = 256) -> float:
    """Balanced accuracy of the ``p >= 0.5 -> clean`` decision on paired sets."""
    correct = 0
    for start in range(0, len(x_clean), batch_size):
        xc = x_clean[start:start + batch_size]
        xa = x_adv[start:start + batch_size]
        x, y = detection_batch(xc, xa)
        p = detector_forward(detector, x, probe).p
        correct += int(((p >= 0.5) == (y > 0)).sum())
    return correct / (2 * len(x_clean))
