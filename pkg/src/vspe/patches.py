"""Tiling, sliding-window inference and merging of overlapping patch predictions.

Prediction file (JSON)::

    {"volumes": [{"id": "case_0003",
                  "boxes": [{"corners": [lo0, lo1, lo2, hi0, hi1, hi2], "class": 0, "score": 0.91}]}]}

Corners are voxel units of the full volume; boxes are listed by descending score.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import GlobalBox, pairwise_iou, patch_to_global
from .tensor import no_grad

FUSION_RULES = ("max", "mean")


@dataclass(frozen=True)
class PatchGrid:
    patch_size: tuple
    stride: tuple
    offsets: tuple  # lexicographically sorted (o0, o1, o2)
    volume_shape: tuple
    padding: tuple  # zero padding appended at the high end of each axis

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def padded_shape(self) -> tuple:
        return tuple(n + p for n, p in zip(self.volume_shape, self.padding))


def _axis_offsets(n: int, p: int, stride: int) -> list[int]:
    if n <= p:
        return [0]
    offs = list(range(0, n - p, stride))
    offs.append(n - p)  # last patch shifted inward
    return sorted(set(offs))


def tile_volume(volume_shape, patch_size, overlap: float = 0.5) -> PatchGrid:
    """Patch offsets covering every voxel.

    The stride per axis is ``ceil(patch * (1 - overlap))``. Axes shorter than
    the patch are zero-padded to the patch size.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    shape = tuple(int(n) for n in volume_shape)
    patch = tuple(int(p) for p in patch_size)
    if len(shape) != 3 or len(patch) != 3:
        raise ValueError("volume and patch need three extents")
    if min(shape) <= 0 or min(patch) <= 0:
        raise ValueError("extents must be positive")
    stride = tuple(max(1, math.ceil(p * (1.0 - overlap))) for p in patch)
    padding = tuple(max(p - n, 0) for n, p in zip(shape, patch))
    padded = tuple(n + d for n, d in zip(shape, padding))
    if any(p > n for p, n in zip(patch, padded)):
        raise ValueError("patch larger than the padded volume")
    axes = [_axis_offsets(n, p, s) for n, p, s in zip(padded, patch, stride)]
    offsets = tuple(itertools.product(*axes))
    return PatchGrid(patch, stride, offsets, shape, padding)


def extract_patches(volume: np.ndarray, grid: PatchGrid, indices=None) -> np.ndarray:
    """``[N, 1, *patch]`` stack of the grid's patches (zero-padded volume)."""
    vol = np.asarray(volume)
    if tuple(vol.shape) != grid.volume_shape:
        raise ValueError(f"volume shape {vol.shape} does not match the grid {grid.volume_shape}")
    if any(grid.padding):
        vol = np.pad(vol, [(0, d) for d in grid.padding])
    idx = range(len(grid)) if indices is None else indices
    out = [vol[tuple(slice(o, o + p) for o, p in zip(grid.offsets[i], grid.patch_size))] for i in idx]
    return np.stack(out)[:, None]


@dataclass(frozen=True)
class MergeConfig:
    iou_threshold: float = 0.1
    score_floor: float = 0.05
    fusion: str = "mean"
    border_weighting: bool = False

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must lie in [0, 1)")
        if self.fusion not in FUSION_RULES:
            raise ValueError(f"fusion must be one of {FUSION_RULES}")


BORDER_WEIGHT = 0.5


def _touches_inner_border(corners: np.ndarray, offset, patch_size, volume_shape) -> bool:
    """Whether the box reaches a patch face that is not also a volume face."""
    lo = np.asarray(offset, dtype=np.float64)
    hi = lo + np.asarray(patch_size, dtype=np.float64)
    bound = np.asarray(volume_shape, dtype=np.float64)
    low_face = (corners[:3] <= lo + 0.5) & (lo > 0)
    high_face = (corners[3:] >= hi - 0.5) & (hi < bound)
    return bool(np.any(low_face | high_face))


def query_detections(probs: np.ndarray, boxes: np.ndarray, score_floor: float):
    """Per-query (label, score, box) keeping queries whose best object probability reaches the floor."""
    obj = probs[:, :-1]
    labels = obj.argmax(axis=-1)
    scores = obj[np.arange(len(obj)), labels]
    keep = np.nonzero(scores >= score_floor)[0]
    return [(int(labels[q]), float(scores[q]), boxes[q]) for q in keep]


def sliding_infer(model, volume: np.ndarray, grid: PatchGrid, score_floor: float = 0.05,
                  batch_size: int = 8, border_weighting: bool = False) -> list[GlobalBox]:
    """Raw (pre-merge) global detections of every patch, in patch then query order."""
    raw: list[GlobalBox] = []
    vol = np.asarray(volume)
    for start in range(0, len(grid), batch_size):
        idx = list(range(start, min(start + batch_size, len(grid))))
        batch = extract_patches(vol, grid, idx)
        with no_grad():
            out = model.forward(batch, train=False)
        det = out.final
        probs = det.probs().astype(np.float64)
        boxes = det.boxes.data.astype(np.float64)
        for j, i in enumerate(idx):
            off = grid.offsets[i]
            for label, score, box in query_detections(probs[j], boxes[j], score_floor):
                g = patch_to_global(box, off, grid.patch_size, grid.volume_shape, label, score)
                if np.any(g.corners[3:] <= g.corners[:3]):
                    continue  # entirely in the padding
                if border_weighting and _touches_inner_border(g.corners, off, grid.patch_size,
                                                              grid.volume_shape):
                    g.weight = BORDER_WEIGHT
                raw.append(g)
    return raw


# -- merging ----------------------------------------------------------------------------------


def _fuse(members: list[GlobalBox], fusion: str) -> GlobalBox:
    if len(members) == 1:
        m = members[0]
        return GlobalBox(m.corners.copy(), m.label, m.score)
    scores = np.array([m.score for m in members])
    w = scores * np.array([m.weight for m in members])
    if w.sum() <= 0:
        w = np.ones_like(w)
    corners = (w[:, None] * np.array([m.corners for m in members])).sum(0) / w.sum()
    score = float(scores.max()) if fusion == "max" else float(scores.mean())
    return GlobalBox(corners, members[0].label, score)


def greedy_clusters(boxes: list[GlobalBox], iou_threshold: float) -> list[list[int]]:
    """One greedy pass: in descending score order each box joins the highest-score cluster
    of its class whose founder it overlaps with IoU >= threshold, or founds a new one.

    Returns member index lists, ordered by founder score (founder first in each).
    """
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    corners = np.array([b.corners for b in boxes]).reshape(-1, 6)
    founders: list[int] = []
    clusters: list[list[int]] = []
    for i in order:
        chosen = None
        if founders:
            same = [c for c, f in enumerate(founders) if boxes[f].label == boxes[i].label]
            if same:
                iou = pairwise_iou(corners[i][None], corners[[founders[c] for c in same]])[0]
                # founders are in descending score order, so the first hit wins
                hits = np.nonzero(iou >= iou_threshold)[0]
                if len(hits):
                    chosen = same[int(hits[0])]
        if chosen is None:
            founders.append(i)
            clusters.append([i])
        else:
            clusters[chosen].append(i)
    return clusters


def merge_predictions(raw: list[GlobalBox], mc: MergeConfig = MergeConfig()) -> list[GlobalBox]:
    """Cluster duplicates and fuse each cluster into one box.

    Greedy passes repeat on the fused boxes until none merge, so the result
    is a fixed point: merging it again returns it unchanged. Fused boxes are
    always recomputed from the original members.
    """
    groups = [[b] for b in raw if b.score >= mc.score_floor]
    fused = [_fuse(g, mc.fusion) for g in groups]
    while True:
        clusters = greedy_clusters(fused, mc.iou_threshold)
        if len(clusters) == len(fused):
            break
        groups = [[m for i in c for m in groups[i]] for c in clusters]
        fused = [_fuse(g, mc.fusion) for g in groups]
    order = sorted(range(len(fused)), key=lambda i: -fused[i].score)
    return [fused[i] for i in order]


# -- prediction files ---------------------------------------------------------------------------


def predictions_record(per_volume: dict[str, list[GlobalBox]]) -> dict:
    vols = []
    for vid in sorted(per_volume):
        boxes = sorted(per_volume[vid], key=lambda b: -b.score)
        vols.append({"id": vid, "boxes": [{"corners": [float(v) for v in b.corners], "class": int(b.label),
                                           "score": float(b.score)} for b in boxes]})
    return {"volumes": vols}


def write_predictions(per_volume: dict[str, list[GlobalBox]], path) -> None:
    Path(path).write_text(json.dumps(predictions_record(per_volume), indent=2) + "\n")


def read_predictions(path) -> dict[str, list[GlobalBox]]:
    try:
        rec = json.loads(Path(path).read_text())
        return {v["id"]: [GlobalBox(b["corners"], b["class"], b["score"]) for b in v["boxes"]]
                for v in rec["volumes"]}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
