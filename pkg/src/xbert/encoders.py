"""Point and image transformers, patch embeddings and the cross-modal fusion encoder.

All modules take a leading batch axis: point patches are (B, g, k, 3), images
(B, H, W), sequences (B, 1 + n, D) with the class token at position 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import MLP, LayerNorm, Linear, Module, Parameter, ShapeError, Tensor
from .numerics.functional import scaled_dot_product_attention


@dataclass
class TransformerConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    cross_heads: int = 4
    ffn_mult: int = 4
    ice_blocks: int = 2

    def __post_init__(self):
        for name in ("heads", "cross_heads"):
            h = getattr(self, name)
            if h < 1 or self.dim % h:
                raise ValueError(f"hidden dim {self.dim} is not divisible by {name}={h}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass
class TokenSequence:
    embeddings: Tensor  # (B, 1 + n, D), class embedding first
    positions: Tensor  # (B, 1 + n, D)
    mask: np.ndarray = field(default=None)  # (B, n) bool

    def __post_init__(self):
        B, L, _ = self.embeddings.shape
        if self.mask is None:
            self.mask = np.zeros((B, L - 1), dtype=bool)
        if self.positions.shape != self.embeddings.shape:
            raise ShapeError(f"positions {self.positions.shape} vs embeddings {self.embeddings.shape}")
        if self.mask.shape != (B, L - 1):
            raise ShapeError(f"mask {self.mask.shape} does not match {L - 1} patch positions")

    def inputs(self) -> Tensor:
        return self.embeddings + self.positions


@dataclass
class EncoderOutput:
    z_cls: Tensor  # (B, D)
    z_patches: Tensor  # (B, n, D)


def _expand(param: Parameter, batch: int) -> Tensor:
    """(D,) parameter -> (B, 1, D) via a broadcast add, keeping the gradient path."""
    return nx.reshape(param, (1, 1, -1)) + np.zeros((batch, 1, param.shape[-1]), np.float32)


def _init_embedding(rng, *shape) -> np.ndarray:
    return (rng.standard_normal(shape) * 0.02).astype(np.float32)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, D = x.shape
        return nx.reshape(x, (*lead, n, self.heads, D // self.heads)).swapaxes(-2, -3)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        if context.shape[-1] != x.shape[-1]:
            raise ShapeError(f"attention: query dim {x.shape[-1]} vs context dim {context.shape[-1]}")
        att = scaled_dot_product_attention(
            self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        )
        merged = att.swapaxes(-2, -3)
        return self.out(nx.reshape(merged, x.shape))


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng):
        self.net = MLP([dim, dim * mult, dim], rng)

    def forward(self, x):
        return self.net(x)


class TransformerBlock(Module):
    """Pre-norm self-attention + FFN."""

    def __init__(self, config: TransformerConfig, rng):
        D = config.dim
        self.norm1 = LayerNorm(D)
        self.attn = MultiHeadAttention(D, config.heads, rng)
        self.norm2 = LayerNorm(D)
        self.ffn = FeedForward(D, config.ffn_mult, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class CrossBlock(Module):
    """Pre-norm self-attention, then cross-attention into a context stream, then FFN."""

    def __init__(self, config: TransformerConfig, rng):
        D = config.dim
        self.norm1 = LayerNorm(D)
        self.self_attn = MultiHeadAttention(D, config.heads, rng)
        self.norm2 = LayerNorm(D)
        self.norm_ctx = LayerNorm(D)
        self.cross_attn = MultiHeadAttention(D, config.cross_heads, rng)
        self.norm3 = LayerNorm(D)
        self.ffn = FeedForward(D, config.ffn_mult, rng)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_ctx(context))
        return x + self.ffn(self.norm3(x))


class TransformerEncoder(Module):
    def __init__(self, config: TransformerConfig, rng):
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(config.dim)

    def forward(self, seq: TokenSequence) -> EncoderOutput:
        x = seq.inputs()
        for block in self.blocks:
            x = block(x)
        if self.blocks:  # an empty stack is the identity
            x = self.norm(x)
        return EncoderOutput(x[:, 0], x[:, 1:])


class PointPatchEmbed(Module):
    """mini-PointNet content embedding, center MLP positions, mask and class tokens."""

    def __init__(self, dim: int, rng, hidden: int = 64):
        self.point_mlp = MLP([3, hidden, hidden], rng)
        self.proj = Linear(hidden, dim, rng)
        self.pos_mlp = MLP([3, hidden, dim], rng)
        self.mask_token = Parameter(_init_embedding(rng, dim))
        self.cls_token = Parameter(_init_embedding(rng, dim))
        self.cls_pos = Parameter(_init_embedding(rng, dim))
        self.dim = dim

    def forward(self, patches, centers, mask=None) -> TokenSequence:
        patches = np.asarray(patches, np.float32)
        centers = np.asarray(centers, np.float32)
        if patches.ndim != 4 or patches.shape[-1] != 3:
            raise ShapeError(f"patches must be (B, g, k, 3), got {patches.shape}")
        B, g = patches.shape[:2]
        if centers.shape != (B, g, 3):
            raise ShapeError(f"centers {centers.shape} do not match patches {patches.shape}")
        mask = np.zeros((B, g), bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (B, g):
            raise ShapeError(f"mask {mask.shape} does not match (B, g)=({B}, {g})")
        per_point = self.point_mlp(nx.tensor(patches))
        content = self.proj(nx.max_(per_point, axis=2))
        if mask.any():
            # masked rows become exactly the mask embedding; the content path is cut
            keep = (~mask)[..., None].astype(np.float32)
            content = content * keep + nx.reshape(self.mask_token, (1, 1, -1)) * (1.0 - keep)
        pos = self.pos_mlp(nx.tensor(centers))
        emb = nx.concat([_expand(self.cls_token, B), content], axis=1)
        positions = nx.concat([_expand(self.cls_pos, B), pos], axis=1)
        return TokenSequence(emb, positions, mask)


def image_patches(images, patch: int) -> np.ndarray:
    """(B, H, W) -> (B, v, patch*patch) non-overlapping patches in row-major order."""
    images = np.asarray(images, np.float32)
    if images.ndim == 2:
        images = images[None]
    B, H, W = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch)


class ImagePatchEmbed(Module):
    def __init__(self, dim: int, image_size: int, patch: int, rng):
        if image_size % patch:
            raise ValueError(f"image size {image_size} is not divisible by patch size {patch}")
        self.patch = patch
        self.num_patches = (image_size // patch) ** 2
        self.proj = Linear(patch * patch, dim, rng)
        self.pos = Parameter(_init_embedding(rng, self.num_patches, dim))
        self.cls_token = Parameter(_init_embedding(rng, dim))
        self.cls_pos = Parameter(_init_embedding(rng, dim))

    def forward(self, images) -> TokenSequence:
        flat = image_patches(images, self.patch)
        B, v, _ = flat.shape
        if v != self.num_patches:
            raise ShapeError(f"expected {self.num_patches} image patches, got {v}")
        content = self.proj(nx.tensor(flat))
        emb = nx.concat([_expand(self.cls_token, B), content], axis=1)
        pos = nx.reshape(self.pos, (1, v, -1)) + np.zeros((B, v, self.pos.shape[-1]), np.float32)
        positions = nx.concat([_expand(self.cls_pos, B), pos], axis=1)
        return TokenSequence(emb, positions)


class PointEncoder(Module):
    def __init__(self, config: TransformerConfig, rng):
        self.embed = PointPatchEmbed(config.dim, rng)
        self.encoder = TransformerEncoder(config, rng)

    def forward(self, patches, centers, mask=None) -> EncoderOutput:
        return self.encoder(self.embed(patches, centers, mask))


class ImageEncoder(Module):
    def __init__(self, config: TransformerConfig, image_size: int, patch: int, rng):
        self.embed = ImagePatchEmbed(config.dim, image_size, patch, rng)
        self.encoder = TransformerEncoder(config, rng)

    def forward(self, images) -> EncoderOutput:
        return self.encoder(self.embed(images))


class InteractiveCrossEncoder(Module):
    """Two cross blocks: image tokens attend to points, then points attend to the updated images.

    Class tokens are excluded by the caller. Additional blocks, when configured,
    keep alternating image-query / point-query.
    """

    def __init__(self, config: TransformerConfig, rng):
        if config.ice_blocks < 2 or config.ice_blocks % 2:
            raise ValueError("the fusion encoder needs an even number (>= 2) of blocks")
        self.blocks = [CrossBlock(config, rng) for _ in range(config.ice_blocks)]
        self.norm = LayerNorm(config.dim)

    def forward(self, z_p: Tensor, z_i: Tensor) -> Tensor:
        if z_p.shape[-1] != z_i.shape[-1] or z_p.shape[:-2] != z_i.shape[:-2]:
            raise ShapeError(f"fusion streams disagree: points {z_p.shape}, images {z_i.shape}")
        for img_block, pt_block in zip(self.blocks[::2], self.blocks[1::2]):
            z_i = img_block(z_i, z_p)
            z_p = pt_block(z_p, z_i)
        return self.norm(z_p)


class TokenHead(Module):
    """Per-position 2-layer MLP to vocabulary logits."""

    def __init__(self, dim: int, vocab_size: int, rng):
        self.mlp = MLP([dim, dim, vocab_size], rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.mlp(z)


def encoder_forward(encoder: TransformerEncoder, seq: TokenSequence) -> EncoderOutput:
    return encoder(seq)


def ice_forward(ice: InteractiveCrossEncoder, z_p: Tensor, z_i: Tensor) -> Tensor:
    return ice(z_p, z_i)


def predict_tokens(head: TokenHead, z_pi: Tensor) -> Tensor:
    return head(z_pi)


__all__ = [
    "TransformerConfig",
    "TokenSequence",
    "EncoderOutput",
    "MultiHeadAttention",
    "TransformerBlock",
    "CrossBlock",
    "TransformerEncoder",
    "PointPatchEmbed",
    "ImagePatchEmbed",
    "PointEncoder",
    "ImageEncoder",
    "InteractiveCrossEncoder",
    "TokenHead",
    "image_patches",
    "encoder_forward",
    "ice_forward",
    "predict_tokens",
]
