"""Backbone, transformer layers and deformable attention."""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..nn import (
    Conv3d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiheadAttention,
    attention,
    merge_heads,
    split_heads,
)
from ..tensor import Tensor


class Backbone(Module):
    """Plain convolutional encoder: a stem, then stride-2 stages of two 3x3x3 convs."""

    def __init__(self, channels, stem_channels: int, rng: np.random.Generator, dtype=np.float64):
        self.stem = Conv3d(1, stem_channels, rng, dtype=dtype)
        self.stages = []
        c_prev = stem_channels
        for c in channels:
            self.stages.append([Conv3d(c_prev, c, rng, stride=2, dtype=dtype), Conv3d(c, c, rng, dtype=dtype)])
            c_prev = c

    def __call__(self, x: Tensor) -> list[Tensor]:
        """``[B, 1, D, H, W]`` -> feature maps of every stage, finest first."""
        x = self.stem(x).relu()
        pyramid = []
        for down, conv in self.stages:
            x = down(x).relu()
            x = conv(x).relu()
            pyramid.append(x)
        return pyramid

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for i, (down, conv) in enumerate(self.stages):
            yield from down.named_parameters(f"{prefix}stages.{i}.0.")
            yield from conv.named_parameters(f"{prefix}stages.{i}.1.")


def flatten_tokens(feature: Tensor) -> Tensor:
    """``[B, C, D, H, W]`` -> ``[B, D * H * W, C]`` in C order."""
    B, C = feature.shape[:2]
    return feature.reshape(B, C, -1).transpose(0, 2, 1)


class EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng, dtype):
        self.self_attn = MultiheadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def __call__(self, src: Tensor, pos) -> Tensor:
        q = src + pos if pos is not None else src
        src = self.norm1(src + self.self_attn(q, q, src))
        return self.norm2(src + self.ffn(src))


class DecoderLayer(Module):
    """Self-attention, global cross-attention, FFN; post-norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng, dtype):
        self.self_attn = MultiheadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_attn = MultiheadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)

    def __call__(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, pos, self_mask=None) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, self_mask))
        key = memory + pos if pos is not None else memory
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, key, memory))
        return self.norm3(tgt + self.ffn(tgt))


def _batch(x: Tensor, B: int) -> Tensor:
    return x if x.shape[0] == B else x.expand((B,) + x.shape[1:])


class ConditionalCrossAttention(Module):
    """Cross-attention whose per-head query/key are [content ; spatial] concatenations.

    The attention logit then splits into a content dot product and a
    spatial dot product between the query's reference embedding and the key
    positional encoding.
    """

    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.q_content = Linear(dim, dim, rng, dtype)
        self.q_pos = Linear(dim, dim, rng, dtype)
        self.q_spatial = Linear(dim, dim, rng, dtype)
        self.k_content = Linear(dim, dim, rng, dtype)
        self.k_pos = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)
        self.last_weights = None

    def __call__(self, tgt, query_pos, spatial_embed, memory, pos, first: bool) -> Tensor:
        h = self.heads
        qc = self.q_content(tgt)
        kc = self.k_content(memory)
        kp = self.k_pos(pos)
        if first:
            qc = qc + self.q_pos(query_pos)
            kc = kc + kp
        qs = _batch(self.q_spatial(spatial_embed), qc.shape[0])
        q = T.concat([split_heads(qc, h), split_heads(qs, h)], axis=-1)
        k = T.concat([split_heads(kc, h), split_heads(_batch(kp, kc.shape[0]), h)], axis=-1)
        v = split_heads(self.v_proj(memory), h)
        out, w = attention(q, k, v)
        self.last_weights = w
        return self.out_proj(merge_heads(out))


class ConditionalDecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng, dtype):
        self.self_attn = MultiheadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_attn = ConditionalCrossAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)

    def __call__(self, tgt, query_pos, spatial_embed, memory, pos, first: bool) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt, query_pos, spatial_embed, memory, pos, first))
        return self.norm3(tgt + self.ffn(tgt))


def _head_directions(heads: int) -> np.ndarray:
    """Evenly spread unit directions (Fibonacci sphere), scaled to unit max-norm."""
    i = np.arange(heads) + 0.5
    phi = np.arccos(1 - 2 * i / heads)
    theta = np.pi * (1 + 5**0.5) * i
    d = np.stack([np.cos(phi), np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta)], axis=-1)
    return d / np.abs(d).max(axis=-1, keepdims=True)


class DeformableAttention(Module):
    """Multi-scale deformable attention over flattened 3D feature levels.

    Every query samples ``points`` locations per head and level around its
    reference and mixes them with weights softmax-normalised over
    ``levels x points``.
    """

    def __init__(self, dim: int, heads: int, levels: int, points: int, rng, dtype):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads, self.levels, self.points = heads, levels, points
        self.value_proj = Linear(dim, dim, rng, dtype)
        self.offsets = Linear(dim, heads * levels * points * 3, rng, dtype)
        self.offsets.weight.data[...] = 0
        grid = _head_directions(heads)[:, None, None, :] * (np.arange(points) + 1.0)[None, None, :, None]
        grid = np.broadcast_to(grid, (heads, levels, points, 3))
        self.offsets.bias.data[...] = grid.reshape(-1)
        self.weights = Linear(dim, heads * levels * points, rng, dtype)
        self.weights.weight.data[...] = 0
        self.out_proj = Linear(dim, dim, rng, dtype)
        self.last_weights = None
        self.last_locations = None

    def __call__(self, query: Tensor, reference, value: Tensor, shapes) -> Tensor:
        """
        Args:
            query: ``[B, Lq, E]``.
            reference: ``[B, Lq, 3]`` points or ``[B, Lq, 6]`` center-size
                boxes, normalised (array or Tensor; no gradient is taken).
            value: ``[B, Lv, E]`` tokens of all levels, concatenated.
            shapes: ``(D, H, W)`` of each level, in concatenation order.
        """
        B, Lq, E = query.shape
        h, nl, npnt = self.heads, self.levels, self.points
        dh = E // h
        ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
        v = self.value_proj(value)
        off = self.offsets(query).reshape(B, Lq, h, nl, npnt, 3)
        aw = T.softmax(self.weights(query).reshape(B, Lq, h, nl * npnt), axis=-1)
        self.last_weights = aw
        aw = aw.reshape(B, Lq, h, nl, npnt)
        sizes = np.asarray(shapes, dtype=ref.dtype)  # [nl, 3]
        if ref.shape[-1] == 3:
            scale = (1.0 / sizes)[None, None, None, :, None, :]
            loc = off * scale.astype(query.dtype) + ref[:, :, None, None, None, :].astype(query.dtype)
        else:
            centers = ref[:, :, None, None, None, :3]
            half = ref[:, :, None, None, None, 3:] * (0.5 / npnt)
            loc = off * half.astype(query.dtype) + centers.astype(query.dtype)
        self.last_locations = loc
        acc = None
        start = 0
        for lvl, shape in enumerate(shapes):
            n = int(np.prod(shape))
            v_l = v[:, start : start + n].reshape(B, n, h, dh).transpose(0, 2, 1, 3)
            v_l = v_l.reshape((B * h,) + tuple(shape) + (dh,))
            loc_l = loc[:, :, :, lvl].transpose(0, 2, 1, 3, 4).reshape(B * h, Lq * npnt, 3)
            s = T.grid_sample3d(v_l, loc_l).reshape(B, h, Lq, npnt, dh)
            w_l = aw[:, :, :, lvl].transpose(0, 2, 1, 3).unsqueeze(-1)
            part = (s * w_l).sum(axis=3)
            acc = part if acc is None else acc + part
            start += n
        return self.out_proj(merge_heads(acc))


class DeformableEncoderLayer(Module):
    def __init__(self, dim, heads, ffn_dim, levels, points, rng, dtype):
        self.attn = DeformableAttention(dim, heads, levels, points, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def __call__(self, src, pos, reference, shapes):
        src = self.norm1(src + self.attn(src + pos, reference, src, shapes))
        return self.norm2(src + self.ffn(src))


class DeformableDecoderLayer(Module):
    def __init__(self, dim, heads, ffn_dim, levels, points, rng, dtype):
        self.self_attn = MultiheadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_attn = DeformableAttention(dim, heads, levels, points, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)

    def __call__(self, tgt, query_pos, reference, memory, shapes, self_mask=None):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, self_mask))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, reference, memory, shapes))
        return self.norm3(tgt + self.ffn(tgt))


def inverse_sigmoid(x, eps: float = 1e-5):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.log(np.clip(x, eps, None) / np.clip(1.0 - x, eps, None))


def prior_bias(prob: float) -> float:
    return math.log(prob / (1.0 - prob))
