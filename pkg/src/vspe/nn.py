"""Parameter containers and the layers the detectors are assembled from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters are discovered from attributes in definition order.

    Only leaf tensors that require gradients count, so intermediate results a
    layer caches for inspection (attention weights, sampling locations) are
    never mistaken for parameters.
    """

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and value.is_leaf:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad and item.is_leaf:
                        yield f"{name}.{i}", item

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.asarray(arr, dtype=p.dtype, order="C").copy()
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = param(xavier_uniform(rng, d_in, d_out, (d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = param(rng.normal(0.0, 1.0, size=(num, dim)), dtype)

    def __call__(self, index) -> Tensor:
        return self.weight[np.asarray(index, dtype=np.int64)]


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, dtype=np.float64):
        fan_in = c_in * kernel**3
        # He init for ReLU stacks
        std = math.sqrt(2.0 / fan_in)
        self.weight = param(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel, kernel)), dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Stack of linear layers with ReLU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, num_layers: int,
                 rng: np.random.Generator, dtype=np.float64):
        dims = [d_in] + [d_hidden] * (num_layers - 1) + [d_out]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, E] -> [B, heads, L, E / heads]"""
    B, L, E = x.shape
    return x.reshape(B, L, heads, E // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, L, dh] -> [B, L, heads * dh]"""
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``[B, h, L, d]`` operands.

    ``mask`` (bool, broadcastable to ``[B, h, Lq, Lk]``) marks blocked pairs.
    Returns the mixed values and the attention weights.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.swapaxes(-1, -2)) * scale
    weights = T.softmax(scores, axis=-1, mask=mask)
    return weights @ v, weights


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)
        self.last_weights: Tensor | None = None

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
        h = self.heads
        q = split_heads(self.q_proj(query), h)
        k = split_heads(self.k_proj(key), h)
        v = split_heads(self.v_proj(value), h)
        out, w = attention(q, k, v, mask)
        self.last_weights = w
        return self.out_proj(merge_heads(out))


class FeedForward(Module):
    def __init__(self, dim: int, ffn_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.fc1 = Linear(dim, ffn_dim, rng, dtype)
        self.fc2 = Linear(ffn_dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())
