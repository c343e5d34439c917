"""Vision Transformer building blocks: patches, embeddings, attention, encoders."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor
from .nn import MLP, LayerNorm, Linear, Module, trunc_normal, xavier_uniform


@dataclass(frozen=True)
class ModelShape:
    layers: int
    hidden: int
    heads: int
    mlp: int
    patch: int

    def __post_init__(self):
        if self.layers < 0 or self.hidden < 1 or self.heads < 1 or self.mlp < 1 or self.patch < 1:
            raise ValueError(f"invalid model shape {self}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def check_image(self, height: int, width: int) -> int:
        """Return the patch count for an image, rejecting indivisible sides."""
        if height % self.patch or width % self.patch:
            raise ValueError(f"image {height}x{width} is not divisible by patch size {self.patch}")
        return (height // self.patch) * (width // self.patch)

    def to_dict(self) -> dict:
        return asdict(self)


# Full-scale shapes.
DETECTOR_SHAPE = ModelShape(layers=12, hidden=192, heads=3, mlp=768, patch=4)
ENCODER_SHAPE = ModelShape(layers=12, hidden=384, heads=3, mlp=1536, patch=4)
DECODER_SHAPE = ModelShape(layers=8, hidden=192, heads=4, mlp=768, patch=4)


def patchify(images, patch: int):
    """(N, H, W, C) -> (N, M, P*P*C), patches in row-major order.

    Accepts numpy arrays or Tensors; an unbatched (H, W, C) image gives (M, P*P*C).
    """
    is_tensor = isinstance(images, Tensor)
    single = images.ndim == 3
    x = images.reshape((1,) + tuple(images.shape)) if single else images
    n, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError("patchify", (h, w, c), (patch, patch))
    gh, gw = h // patch, w // patch
    x = x.reshape((n, gh, patch, gw, patch, c))
    x = ag.transpose(x, (0, 1, 3, 2, 4, 5)) if is_tensor else x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape((n, gh * gw, patch * patch * c))
    return x.reshape(tuple(x.shape[1:])) if single else x


def unpatchify(patches, patch: int, height: int, width: int, channels: int):
    """Inverse of :func:`patchify`."""
    is_tensor = isinstance(patches, Tensor)
    single = patches.ndim == 2
    x = patches.reshape((1,) + tuple(patches.shape)) if single else patches
    n = x.shape[0]
    gh, gw = height // patch, width // patch
    if x.shape[1] != gh * gw or x.shape[2] != patch * patch * channels:
        raise ShapeError("unpatchify", x.shape, (height, width, channels))
    x = x.reshape((n, gh, gw, patch, patch, channels))
    x = ag.transpose(x, (0, 1, 3, 2, 4, 5)) if is_tensor else x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape((n, height, width, channels))
    return x.reshape(tuple(x.shape[1:])) if single else x


def embed(patches: Tensor, w_proj: Tensor, pos: Tensor) -> Tensor:
    """tokens = patches . W_proj + E_pos."""
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    if patches.shape[-1] != w_proj.shape[0] or pos.shape[-1] != w_proj.shape[1]:
        raise ShapeError("embed", patches.shape, w_proj.shape, pos.shape)
    if pos.shape[-2] != patches.shape[-2]:
        raise ShapeError("embed", patches.shape, pos.shape)
    return patches @ w_proj + pos


def gap(seq: Tensor) -> Tensor:
    """Global average pool over the token axis: (N, M, D) -> (N, D)."""
    if seq.shape[-2] < 1:
        raise ShapeError("gap", seq.shape)
    return ag.mean(seq, axis=-2)


class Attention(Module):
    """Weights for one multi-head self-attention layer.

    ``w_bias`` is the learnable projection of the saliency-token stream that
    produces the additive attention bias; it exists only for biased layers.
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, biased: bool = False):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.proj = Linear(hidden, hidden, rng)
        self.w_bias = Parameter(xavier_uniform(rng, hidden, hidden)) if biased else None


def detection_bias(e_prime: Tensor, w_bias: Tensor) -> Tensor:
    """Symmetric (N, M, M) bias ``B_ij = <(E' W_B)_i, (E' W_B)_j>``."""
    projected = e_prime @ w_bias
    return projected @ ag.transpose(projected, (0, 2, 1))


def _attend(e: Tensor, attn: Attention, bias: Tensor | None, return_weights: bool):
    if e.ndim != 3:
        raise ShapeError("msa", e.shape)
    n, m, d_model = e.shape
    h = attn.heads
    d = d_model // h

    def split(t):
        return ag.transpose(t.reshape((n, m, h, d)), (0, 2, 1, 3))

    q, k, v = split(attn.q(e)), split(attn.k(e)), split(attn.v(e))
    logits = q @ ag.transpose(k, (0, 1, 3, 2))
    if bias is not None:
        if bias.shape != (n, m, m):
            raise ShapeError("msa_biased", bias.shape, (n, m, m))
        logits = logits + bias.reshape((n, 1, m, m))
    weights = ag.softmax(ag.scale(logits, 1.0 / np.sqrt(d)))
    out = ag.transpose(weights @ v, (0, 2, 1, 3)).reshape((n, m, d_model))
    out = attn.proj(out)
    return (out, weights) if return_weights else out


def msa_standard(e: Tensor, attn: Attention, return_weights: bool = False):
    """Per-head softmax(Q K^T / sqrt(d)) V, heads concatenated and projected."""
    return _attend(e, attn, None, return_weights)


def msa_biased(e: Tensor, e_prime: Tensor, attn: Attention, return_weights: bool = False):
    """softmax((Q K^T + B) / sqrt(d)) V with B derived from the saliency tokens."""
    if attn.w_bias is None:
        raise ValueError("attention layer has no bias projection")
    if e.shape != e_prime.shape:
        raise ShapeError("msa_biased", e.shape, e_prime.shape)
    return _attend(e, attn, detection_bias(e_prime, attn.w_bias), return_weights)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, shape: ModelShape, rng: np.random.Generator, biased: bool = False):
        self.norm1 = LayerNorm(shape.hidden)
        self.attn = Attention(shape.hidden, shape.heads, rng, biased=biased)
        self.norm2 = LayerNorm(shape.hidden)
        self.mlp = MLP(shape.hidden, shape.mlp, shape.hidden, rng)

    @property
    def biased(self) -> bool:
        return self.attn.w_bias is not None

    def forward(self, x: Tensor, e_prime: Tensor | None = None) -> Tensor:
        normed = self.norm1(x)
        if self.biased:
            if e_prime is None:
                raise ValueError("biased block needs the saliency token stream")
            x = x + msa_biased(normed, e_prime, self.attn)
        else:
            x = x + msa_standard(normed, self.attn)
        return x + self.mlp(self.norm2(x))


def encoder_forward(seq: Tensor, blocks, e_prime: Tensor | None = None) -> Tensor:
    """Apply transformer blocks in order; biased blocks all read the same ``e_prime``."""
    if any(b.biased for b in blocks) and e_prime is None:
        raise ValueError("biased encoder needs the saliency token stream")
    for block in blocks:
        seq = block(seq, e_prime)
    return seq


def make_blocks(shape: ModelShape, rng: np.random.Generator, biased: bool = False) -> list[Block]:
    return [Block(shape, rng, biased=biased) for _ in range(shape.layers)]


class PatchEmbed(Module):
    """Linear patch projection plus learnable positional embeddings."""

    def __init__(self, shape: ModelShape, image_shape: tuple, rng: np.random.Generator):
        h, w, c = image_shape
        self.patch = shape.patch
        self.num_patches = shape.check_image(h, w)
        self.proj = Linear(shape.patch * shape.patch * c, shape.hidden, rng)
        self.pos = Parameter(trunc_normal(rng, (1, self.num_patches, shape.hidden)))

    def forward(self, images) -> Tensor:
        patches = patchify(images, self.patch)
        if not isinstance(patches, Tensor):
            patches = Tensor(patches)
        return embed(patches, self.proj.weight, self.pos) + self.proj.bias


class ViTEncoder(Module):
    """Patch embedding, transformer blocks and a final LayerNorm."""

    def __init__(self, shape: ModelShape, image_shape: tuple, rng: np.random.Generator):
        self.shape = shape
        self.embed = PatchEmbed(shape, image_shape, rng)
        self.blocks = make_blocks(shape, rng)
        self.norm = LayerNorm(shape.hidden)

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        return self.norm(encoder_forward(tokens, self.blocks))

    def forward(self, images) -> Tensor:
        return self.encode_tokens(self.embed(images))


class ViTClassifier(Module):
    """Plain ViT with global average pooling and an MLP head."""

    def __init__(self, shape: ModelShape, image_shape: tuple, classes: int, rng: np.random.Generator):
        self.encoder = ViTEncoder(shape, image_shape, rng)
        self.head = MLP(shape.hidden, shape.hidden, classes, rng)

    def features(self, images) -> Tensor:
        return gap(self.encoder(images))

    def forward(self, images) -> Tensor:
        return self.head(self.features(images))
