"""Axis-aligned 3D boxes.

Two parameterisations are used throughout:

* center-size ``(c0, c1, c2, s0, s1, s2)``, normalised to a patch, which is
  what the detectors regress;
* corners ``(lo0, lo1, lo2, hi0, hi1, hi2)``, in normalised or voxel units.

Component ``i`` always refers to array axis ``i`` of the volume. Voxel ``j``
along an axis covers the interval ``[j, j + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

_EPS = 1e-12


@dataclass(frozen=True)
class Box3D:
    """Normalised center-size box. ``cx, cy, cz`` index axes 0, 1, 2."""

    cx: float
    cy: float
    cz: float
    w: float
    h: float
    d: float

    def __post_init__(self):
        if min(self.w, self.h, self.d) <= 0:
            raise ValueError(f"box extents must be positive, got {(self.w, self.h, self.d)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.h, self.d], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        return cls(*(float(v) for v in np.asarray(arr).reshape(6)))

    def to_corners(self) -> np.ndarray:
        return to_corners(self.as_array())

    @classmethod
    def from_corners(cls, corners) -> "Box3D":
        return cls.from_array(to_center_size(corners))


@dataclass
class GlobalBox:
    """A box in voxel units of a full volume, with class and confidence."""

    corners: np.ndarray
    label: int = 0
    score: float = 1.0
    weight: float = 1.0  # relative trust when fusing duplicates

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(6)
        self.label = int(self.label)
        self.score = float(self.score)
        self.weight = float(self.weight)

    @property
    def volume(self) -> float:
        return float(box_volume(self.corners))


def to_corners(boxes):
    """Center-size -> corners. Accepts ``[..., 6]`` arrays or ``Box3D``."""
    if isinstance(boxes, Box3D):
        return boxes.to_corners()
    b = np.asarray(boxes, dtype=np.float64)
    if np.any(b[..., 3:] <= 0):
        raise ValueError("box extents must be positive")
    half = 0.5 * b[..., 3:]
    return np.concatenate([b[..., :3] - half, b[..., :3] + half], axis=-1)


def to_center_size(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    size = c[..., 3:] - c[..., :3]
    if np.any(size <= 0):
        raise ValueError("corner boxes need lo < hi on every axis")
    return np.concatenate([0.5 * (c[..., :3] + c[..., 3:]), size], axis=-1)


def box_volume(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return np.prod(np.clip(c[..., 3:] - c[..., :3], 0.0, None), axis=-1)


def _pair_terms(a: np.ndarray, b: np.ndarray):
    inter = np.prod(np.clip(np.minimum(a[..., 3:], b[..., 3:]) - np.maximum(a[..., :3], b[..., :3]), 0.0, None), axis=-1)
    union = box_volume(a) + box_volume(b) - inter
    hull = np.prod(np.maximum(a[..., 3:], b[..., 3:]) - np.minimum(a[..., :3], b[..., :3]), axis=-1)
    return inter, union, hull


def iou_corners(a, b) -> np.ndarray:
    """Elementwise IoU of broadcastable corner arrays."""
    inter, union, _ = _pair_terms(np.asarray(a, float), np.asarray(b, float))
    return inter / np.maximum(union, _EPS)


def giou_corners(a, b) -> np.ndarray:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    inter, union, hull = _pair_terms(a, b)
    union = np.maximum(union, _EPS)
    return inter / union - (hull - union) / np.maximum(hull, _EPS)


def pairwise_iou(a, b) -> np.ndarray:
    """``[N, 6]`` x ``[M, 6]`` corner boxes -> ``[N, M]`` IoU."""
    a = np.asarray(a, float).reshape(-1, 6)
    b = np.asarray(b, float).reshape(-1, 6)
    return iou_corners(a[:, None, :], b[None, :, :])


def pairwise_giou(a, b) -> np.ndarray:
    a = np.asarray(a, float).reshape(-1, 6)
    b = np.asarray(b, float).reshape(-1, 6)
    return giou_corners(a[:, None, :], b[None, :, :])


def iou3d(a, b) -> float:
    """IoU of two center-size boxes (``Box3D`` or length-6 arrays)."""
    return float(iou_corners(to_corners(a), to_corners(b)))


def giou3d(a, b) -> float:
    return float(giou_corners(to_corners(a), to_corners(b)))


def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable GIoU between center-size boxes.

    ``a`` and ``b`` broadcast against each other over the leading axes, so
    ``a[:, None]`` with ``b[None]`` yields the pairwise matrix.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
    a_lo = a[..., :3] - a[..., 3:] * 0.5
    a_hi = a[..., :3] + a[..., 3:] * 0.5
    b_lo = b[..., :3] - b[..., 3:] * 0.5
    b_hi = b[..., :3] + b[..., 3:] * 0.5
    overlap = (T.minimum(a_hi, b_hi) - T.maximum(a_lo, b_lo)).clamp(0.0, None)
    inter = overlap[..., 0] * overlap[..., 1] * overlap[..., 2]
    vol_a = a[..., 3] * a[..., 4] * a[..., 5]
    vol_b = b[..., 3] * b[..., 4] * b[..., 5]
    union = vol_a + vol_b - inter
    span = T.maximum(a_hi, b_hi) - T.minimum(a_lo, b_lo)
    hull = span[..., 0] * span[..., 1] * span[..., 2]
    return inter / union - (hull - union) / hull


def patch_to_global(box, patch_offset, patch_size, volume_shape, label: int = 0, score: float = 1.0) -> GlobalBox:
    """Map a patch-normalised box into voxel coordinates of the full volume, clipped to it."""
    corners = to_corners(box)
    offset = np.asarray(patch_offset, dtype=np.float64)
    size = np.asarray(patch_size, dtype=np.float64)
    bound = np.asarray(volume_shape, dtype=np.float64)
    lo = np.clip(offset + corners[:3] * size, 0.0, bound)
    hi = np.clip(offset + corners[3:] * size, 0.0, bound)
    return GlobalBox(np.concatenate([lo, hi]), label=label, score=score)


def clip_corners(corners, shape) -> np.ndarray:
    c = np.array(corners, dtype=np.float64)
    bound = np.asarray(shape, dtype=np.float64)
    c[..., :3] = np.clip(c[..., :3], 0.0, bound)
    c[..., 3:] = np.clip(c[..., 3:], 0.0, bound)
    return c
