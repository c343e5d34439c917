"""Dual-encoder masked classifier: shared-mask pretraining and adaptive-ensemble fine-tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .nn import MLP, LayerNorm, Linear, Module, trunc_normal
from .vit import ModelShape, ViTEncoder, encoder_forward, gap, make_blocks, patchify

ENSEMBLE_GUARD = 1e-12


@dataclass
class MaskSpec:
    """Patch visibility for one image (True = visible)."""

    visible: np.ndarray
    ratio: float

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())


def visible_count(m: int, ratio: float) -> int:
    """``round(M * (1 - ratio))`` (half rounds up), but never below one patch."""
    return max(1, int(math.floor(m * (1.0 - ratio) + 0.5 + 1e-9)))


def sample_mask(m: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    keep = rng.permutation(m)[: visible_count(m, ratio)]
    visible = np.zeros(m, dtype=bool)
    visible[keep] = True
    return MaskSpec(visible, ratio)


def sample_masks(n: int, m: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(N, M) visibility matrix, one independent mask per row."""
    return np.stack([sample_mask(m, ratio, rng).visible for _ in range(n)]) if n else np.zeros((0, m), bool)


def _visibility(mask, n: int, m: int) -> np.ndarray:
    vis = np.asarray(mask.visible if isinstance(mask, MaskSpec) else mask, dtype=bool)
    if vis.shape[-1] != m:
        raise ValueError(f"mask covers {vis.shape[-1]} patches, sequence has {m}")
    return np.broadcast_to(vis, (n, m))


class DualEncoderMAE(Module):
    """Clean and adversarial encoders sharing one mask token, a decoder and a head."""

    def __init__(self, encoder_shape: ModelShape, decoder_shape: ModelShape, image_shape: tuple,
                 classes: int, rng: np.random.Generator):
        h, w, c = image_shape
        self.image_shape = tuple(image_shape)
        self.patch = encoder_shape.patch
        self.num_patches = encoder_shape.check_image(h, w)
        self.clean_encoder = ViTEncoder(encoder_shape, image_shape, rng)
        self.adv_encoder = ViTEncoder(encoder_shape, image_shape, rng)
        self.mask_token = Parameter(trunc_normal(rng, (1, 1, encoder_shape.hidden)))
        self.decoder = Decoder(encoder_shape.hidden, decoder_shape, self.num_patches,
                               self.patch * self.patch * c, rng)
        self.head = MLP(encoder_shape.hidden, encoder_shape.hidden, classes, rng)

    def backbone(self) -> list[Module]:
        return [self.clean_encoder, self.adv_encoder, self.decoder]

    def backbone_parameters(self):
        named = list(self.clean_encoder.named_parameters("clean_encoder."))
        named += list(self.adv_encoder.named_parameters("adv_encoder."))
        named.append(("mask_token", self.mask_token))
        named += list(self.decoder.named_parameters("decoder."))
        return named


class Decoder(Module):
    def __init__(self, in_dim: int, shape: ModelShape, num_patches: int, patch_dim: int,
                 rng: np.random.Generator):
        self.embed = Linear(in_dim, shape.hidden, rng)
        self.pos = Parameter(trunc_normal(rng, (1, num_patches, shape.hidden)))
        self.blocks = make_blocks(shape, rng)
        self.norm = LayerNorm(shape.hidden)
        self.pred = Linear(shape.hidden, patch_dim, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        x = self.embed(tokens) + self.pos
        return self.pred(self.norm(encoder_forward(x, self.blocks)))


def masked_encode(x, mask, encoder: ViTEncoder, mask_token: Tensor) -> Tensor:
    """Encode visible patches only and re-insert ``mask_token`` at masked positions.

    ``mask`` is a MaskSpec, an (M,) or an (N, M) boolean array; every row must
    have the same number of visible patches. Returns the full (N, M, D) sequence.
    """
    tokens = encoder.embed(x)
    n, m, d = tokens.shape
    vis = _visibility(mask, n, m)
    counts = vis.sum(axis=1)
    if len(counts) and (counts != counts[0]).any():
        raise ValueError("all masks in a batch must expose the same number of patches")
    keep = int(counts[0]) if len(counts) else 0
    if keep == 0:
        raise ValueError("mask hides every patch")
    order = np.argsort(~vis, axis=1, kind="stable")  # visible indices first, in order
    encoded = encoder.encode_tokens(ag.gather(tokens, order[:, :keep]))
    if keep == m:
        return encoded
    filler = ag.mul(mask_token, Tensor(np.ones((n, m - keep, 1)), dtype=tokens.dtype))
    full = ag.concat([encoded, filler], axis=1)
    restore = np.argsort(order, axis=1, kind="stable")
    return ag.gather(full, restore)


def reconstruction_loss(x, x_rec: Tensor, mask, patch: int, target: str = "masked") -> Tensor:
    """Mean squared error in pixel space over masked patches (or all with ``target="all"``).

    ``x`` are the images, ``x_rec`` the decoder's per-patch predictions (N, M, P*P*C).
    """
    if target not in ("masked", "all"):
        raise ValueError(f"unknown reconstruction target {target!r}")
    patches = patchify(np.asarray(x), patch)
    if patches.shape != x_rec.shape:
        raise ag.ShapeError("reconstruction_loss", patches.shape, x_rec.shape)
    n, m, k = patches.shape
    weight = np.ones((n, m)) if target == "all" else ~_visibility(mask, n, m)
    total = weight.sum() * k
    if total == 0:
        return ag.scale(ag.sum_(x_rec), 0.0)
    diff = x_rec - Tensor(patches, dtype=x_rec.dtype)
    sq = diff * diff * Tensor(weight[..., None], dtype=x_rec.dtype)
    return ag.scale(ag.sum_(sq), 1.0 / total)


def contrastive_loss(z: Tensor, tau: float = 0.5) -> Tensor:
    """NT-Xent over 2B rows: row k and row k+B are positives, all others negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = z.shape[0]
    if n % 2 or n < 4:
        raise ValueError(f"contrastive loss needs 2B rows with B >= 2, got {n}")
    b = n // 2
    zn = ag.l2_normalize(z)
    logits = ag.scale(zn @ ag.transpose(zn, (1, 0)), 1.0 / tau)
    others = ~np.eye(n, dtype=bool)
    denom = ag.logsumexp(logits + Tensor(np.where(others, 0.0, -np.inf), dtype=logits.dtype))
    partner = np.concatenate([np.arange(b, n), np.arange(b)])
    pos = logits[np.arange(n), partner]
    return ag.mean(denom - pos)


@dataclass
class PretrainParts:
    loss: Tensor
    rec_clean: float
    rec_adv: float
    contrastive: float


def pretrain_loss(model: DualEncoderMAE, x_clean, x_adv, visible, omega: float = 0.35,
                  tau: float = 0.5, rec_target: str = "masked") -> PretrainParts:
    """``(1 - omega) * mean(rec_clean, rec_adv) + omega * contrastive``.

    The adversarial variant reuses the clean variant's mask; the global
    representations are pooled from the full decoder-input sequences.
    """
    if not 0 <= omega <= 1:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    full_c = masked_encode(x_clean, visible, model.clean_encoder, model.mask_token)
    full_a = masked_encode(x_adv, visible, model.adv_encoder, model.mask_token)
    rec_c = reconstruction_loss(x_clean, model.decoder(full_c), visible, model.patch, rec_target)
    rec_a = reconstruction_loss(x_adv, model.decoder(full_a), visible, model.patch, rec_target)
    rec = ag.scale(rec_c + rec_a, 0.5)
    if omega == 0:
        return PretrainParts(rec, float(rec_c.data), float(rec_a.data), float("nan"))
    cl = contrastive_loss(ag.concat([gap(full_c), gap(full_a)], axis=0), tau)
    loss = cl if omega == 1 else ag.scale(rec, 1 - omega) + ag.scale(cl, omega)
    return PretrainParts(loss, float(rec_c.data), float(rec_a.data), float(cl.data))


@dataclass
class EnsembleRep:
    z_hat: Tensor
    p_used: np.ndarray


def adaptive_ensemble(z_clean, z_adv, mask_clean, mask_adv, p) -> EnsembleRep:
    """Per-patch fusion weighted by the clean probability ``p``.

    ``z_hat_i = (p v_c(i) z_c_i + (1-p) v_a(i) z_a_i) / max(p v_c(i) + (1-p) v_a(i), 1e-12)``
    where ``v_c``/``v_a`` are the visibility indicators. Inputs are (N, M, D) or
    (M, D); ``p`` is a scalar or one value per image and may be a Tensor.
    """
    zc = z_clean if isinstance(z_clean, Tensor) else Tensor(z_clean, dtype=np.asarray(z_clean).dtype)
    za = z_adv if isinstance(z_adv, Tensor) else Tensor(z_adv, dtype=np.asarray(z_adv).dtype)
    single = zc.ndim == 2
    if single:
        zc, za = zc.reshape((1,) + zc.shape), za.reshape((1,) + za.shape)
    if zc.shape != za.shape:
        raise ag.ShapeError("adaptive_ensemble", zc.shape, za.shape)
    n, m, _ = zc.shape
    vc = _visibility(mask_clean, n, m).astype(zc.dtype)
    va = _visibility(mask_adv, n, m).astype(zc.dtype)
    pt = p if isinstance(p, Tensor) else Tensor(np.broadcast_to(np.asarray(p, dtype=zc.dtype), (n,)).copy(), dtype=zc.dtype)
    if pt.ndim == 0:
        pt = pt.reshape((1,))
    p_col = pt.reshape((pt.shape[0], 1))
    w_c = p_col * Tensor(vc, dtype=zc.dtype)
    w_a = (1.0 - p_col) * Tensor(va, dtype=zc.dtype)
    numer = w_c.reshape((n, m, 1)) * zc + w_a.reshape((n, m, 1)) * za
    denom = ag.maximum(w_c + w_a, ENSEMBLE_GUARD).reshape((n, m, 1))
    out = numer / denom
    if single:
        out = out.reshape(out.shape[1:])
    return EnsembleRep(out, np.asarray(pt.data).copy())


def ensemble_logits(model: DualEncoderMAE, x, vis_clean, vis_adv, p) -> Tensor:
    """Two masked encodings, adaptive ensemble, pooling and the MLP head."""
    zc = masked_encode(x, vis_clean, model.clean_encoder, model.mask_token)
    za = masked_encode(x, vis_adv, model.adv_encoder, model.mask_token)
    fused = adaptive_ensemble(zc, za, vis_clean, vis_adv, p).z_hat
    return model.head(gap(fused))
