"""Latent cross-attention encoder, latent transformer, and task heads.

All blocks are batched: inputs carry a leading batch axis.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .layers import LayerNorm, Linear, Module


@dataclass
class LatentConfig:
    num_latents: int = 8          # N
    latent_channels: int = 32     # I
    self_layers: int = 4          # L, per block
    heads_cross: int = 4
    heads_self: int = 4
    num_blocks: int = 2

    def validate(self, embed_dim):
        for name in ("num_latents", "latent_channels", "self_layers",
                     "heads_cross", "heads_self", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.latent_channels % self.heads_self:
            raise ValidationError("latent_channels must be divisible by heads_self")
        if self.latent_channels % self.heads_cross:
            raise ValidationError("latent_channels must be divisible by heads_cross")
        if embed_dim % self.heads_cross:
            raise ValidationError("embed_dim must be divisible by heads_cross")


class MultiHeadAttention(Module):
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated.

    Q is projected from ``q_dim`` and K, V from ``kv_dim`` to ``channels``.
    With ``out_proj`` the concatenated heads are mapped back to ``channels``.
    """

    def __init__(self, q_dim, kv_dim, channels, heads, rng, out_proj=True):
        self.heads = heads
        self.channels = channels
        self.q = Linear(q_dim, channels, rng)
        self.k = Linear(kv_dim, channels, rng)
        self.v = Linear(kv_dim, channels, rng)
        self.out = Linear(channels, channels, rng) if out_proj else None
        self.keep_weights = False
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, self.channels // self.heads)),
                            (0, 2, 1, 3))

    def __call__(self, q_in, kv_in):
        if q_in.ndim != 3 or kv_in.ndim != 3 or q_in.shape[0] != kv_in.shape[0]:
            raise DimensionError(f"attention inputs must be (batch, n, dim): {q_in.shape}, {kv_in.shape}")
        b, nq, _ = q_in.shape
        d_head = self.channels // self.heads
        q = self._split(self.q(q_in))
        k = self._split(self.k(kv_in))
        v = self._split(self.v(kv_in))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2), kind="attention"), 1.0 / np.sqrt(d_head))
        weights = ad.softmax(scores, axis=-1)
        if self.keep_weights:
            self.last_weights = weights.data
        mixed = ad.matmul(weights, v, kind="attention")
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, nq, self.channels))
        return self.out(merged) if self.out is not None else merged


class CrossAttentionBlock(Module):
    """Latent (N x I) attends to context (M x D); pre-norm on both, residual."""

    def __init__(self, latent_channels, context_dim, heads, rng, dropout=0.0):
        self.norm_q = LayerNorm(latent_channels)
        self.norm_kv = LayerNorm(context_dim)
        self.attn = MultiHeadAttention(latent_channels, context_dim, latent_channels, heads, rng)
        self.dropout = dropout

    def __call__(self, latent, context, rng=None):
        if context.shape[-1] != self.norm_kv.gain.shape[0]:
            raise DimensionError(
                f"context width {context.shape[-1]} != expected {self.norm_kv.gain.shape[0]}")
        h = self.attn(self.norm_q(latent), self.norm_kv(context))
        if rng is not None:
            h = ad.dropout(h, self.dropout, rng)
        return ad.add(latent, h)


class SelfAttentionLayer(Module):
    """Pre-norm self-attention and a 4x GELU feed-forward, each with residual."""

    def __init__(self, channels, heads, rng, dropout=0.0):
        self.norm1 = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, channels, channels, heads, rng)
        self.norm2 = LayerNorm(channels)
        self.ff1 = Linear(channels, 4 * channels, rng)
        self.ff2 = Linear(4 * channels, channels, rng)
        self.dropout = dropout

    def __call__(self, x, rng=None):
        y = self.norm1(x)
        h = self.attn(y, y)
        if rng is not None:
            h = ad.dropout(h, self.dropout, rng)
        x = ad.add(x, h)
        h = self.ff2(ad.gelu(self.ff1(self.norm2(x))))
        if rng is not None:
            h = ad.dropout(h, self.dropout, rng)
        return ad.add(x, h)


class PerceiverEncoder(Module):
    """Learned latent array refined by ``num_blocks`` x (cross-attend, L self layers).

    Blocks do not share weights.
    """

    def __init__(self, context_dim, cfg, rng, dropout=0.0):
        cfg.validate(context_dim)
        self.cfg = cfg
        self.latent = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_latents, cfg.latent_channels)),
                             requires_grad=True)
        self.cross = [CrossAttentionBlock(cfg.latent_channels, context_dim, cfg.heads_cross, rng, dropout)
                      for _ in range(cfg.num_blocks)]
        self.layers = [[SelfAttentionLayer(cfg.latent_channels, cfg.heads_self, rng, dropout)
                        for _ in range(cfg.self_layers)] for _ in range(cfg.num_blocks)]

    def named_parameters(self, prefix=""):
        yield f"{prefix}latent", self.latent
        for b, block in enumerate(self.cross):
            yield from block.named_parameters(f"{prefix}cross.{b}.")
            for i, layer in enumerate(self.layers[b]):
                yield from layer.named_parameters(f"{prefix}self.{b}.{i}.")

    def __call__(self, context, rng=None):
        """(batch, M, D) -> (batch, N, I).

        Context rows are first put in lexicographic order, so the result is
        bitwise identical for any ordering of the input features.
        """
        b = context.shape[0]
        context = ad.permute_rows(context, canonical_row_order(context.data))
        latent = ad.add(Tensor(np.zeros((b, 1, 1))), self.latent)
        for cross, layers in zip(self.cross, self.layers):
            latent = cross(latent, context, rng)
            for layer in layers:
                latent = layer(latent, rng)
        return latent


def canonical_row_order(context):
    """Per batch item, the permutation sorting the rows of ``context`` lexicographically."""
    return np.stack([np.lexsort(item.T[::-1]) for item in context])


def concat_latents(cat_latent, num_latent, num_latents, channels, batch):
    """Flatten each (batch, N, I) latent row-major, categorical first -> (batch, 2NI).

    A missing stream (None) contributes zeros.
    """
    parts = []
    for lat in (cat_latent, num_latent):
        if lat is None:
            parts.append(Tensor(np.zeros((batch, num_latents * channels))))
        else:
            if lat.shape[1:] != (num_latents, channels):
                raise DimensionError(f"latent shape {lat.shape[1:]} != {(num_latents, channels)}")
            parts.append(ad.reshape(lat, (batch, num_latents * channels)))
    return ad.concat(parts, axis=1)


class Decoder(Module):
    """Task head: a learned 1 x I query cross-attends to the 2N x I latent
    context, then a linear map gives class logits."""

    def __init__(self, channels, heads, n_classes, rng):
        self.channels = channels
        self.query = Tensor(rng.normal(0.0, 0.02, size=(1, channels)), requires_grad=True)
        self.norm_q = LayerNorm(channels)
        self.norm_kv = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, channels, channels, heads, rng, out_proj=False)
        self.head = Linear(channels, n_classes, rng)

    def __call__(self, latent_vector):
        b, width = latent_vector.shape
        if width % self.channels:
            raise DimensionError(f"latent vector width {width} not a multiple of {self.channels}")
        context = ad.reshape(latent_vector, (b, width // self.channels, self.channels))
        q = ad.add(Tensor(np.zeros((b, 1, 1))), self.query)
        h = self.attn(self.norm_q(q), self.norm_kv(context))
        return self.head(ad.reshape(h, (b, self.channels)))


class MLPHead(Module):
    """Feed-forward head over the flattened latent vector; GELU between layers."""

    def __init__(self, n_in, hidden, n_classes, rng):
        sizes = [n_in, *hidden, n_classes]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x, rng=None, dropout=0.0):
        for layer in self.layers[:-1]:
            x = ad.gelu(layer(x))
            if rng is not None:
                x = ad.dropout(x, dropout, rng)
        return self.layers[-1](x)
