"""Sinusoidal encodings of 3D positions."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, concat

TWO_PI = 2.0 * np.pi


def channels_per_axis(dim: int, num_coords: int = 3) -> int:
    """Even channel count each coordinate receives; leftover channels are zero-filled."""
    return (dim // (2 * num_coords)) * 2


def _frequencies(per_axis: int, temperature: float) -> np.ndarray:
    k = np.arange(per_axis // 2, dtype=np.float64)
    return 1.0 / temperature ** (2.0 * k / per_axis)


def positional_encoding_3d(shape, dim: int, normalize: bool = False, temperature: float = 10000.0) -> np.ndarray:
    """Encoding for every voxel of a ``(D, H, W)`` grid, flattened in C order.

    Each axis gets ``channels_per_axis(dim)`` channels laid out as all sines
    followed by all cosines. Positions are the integer voxel index, or
    ``2 * pi * (i + 0.5) / n`` when ``normalize`` is set so that grids of
    different resolution share one coordinate frame.

    Returns:
        ``[D * H * W, dim]`` array; channels beyond ``3 * per_axis`` are zero.
    """
    shape = tuple(int(s) for s in shape)
    per_axis = channels_per_axis(dim)
    freqs = _frequencies(per_axis, temperature)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    out = np.zeros((int(np.prod(shape)), dim))
    for axis, (g, n) in enumerate(zip(grids, shape)):
        pos = g.reshape(-1)
        if normalize:
            pos = (pos + 0.5) / n * TWO_PI
        ang = pos[:, None] * freqs[None, :]
        start = axis * per_axis
        out[:, start : start + per_axis // 2] = np.sin(ang)
        out[:, start + per_axis // 2 : start + per_axis] = np.cos(ang)
    return out


def sine_embed(coords, dim: int, temperature: float = 10000.0):
    """Encode normalised coordinates ``[..., k]`` in ``[0, 1]`` to ``[..., dim]``.

    Uses the same layout and ``2 * pi`` scaling as the normalised grid
    encoding, so a reference point at a voxel centre gets that voxel's code.
    Works on arrays and, differentiably, on ``Tensor`` inputs.
    """
    num = coords.shape[-1]
    per = channels_per_axis(dim, num)
    freqs = _frequencies(per, temperature)
    pad = dim - num * per
    if isinstance(coords, Tensor):
        parts = []
        for i in range(num):
            ang = coords[..., i : i + 1] * TWO_PI * freqs.astype(coords.dtype)
            parts += [ang.sin(), ang.cos()]
        if pad:
            parts.append(Tensor(np.zeros(coords.shape[:-1] + (pad,), dtype=coords.dtype)))
        return concat(parts, axis=-1)
    c = np.asarray(coords, dtype=np.float64)
    parts = []
    for i in range(num):
        ang = c[..., i : i + 1] * TWO_PI * freqs
        parts += [np.sin(ang), np.cos(ang)]
    if pad:
        parts.append(np.zeros(c.shape[:-1] + (pad,)))
    return np.concatenate(parts, axis=-1)
