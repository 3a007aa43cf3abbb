"""Slow reference implementations used to cross-check the fast code paths.

Each one is written independently of the code it checks: plain loops,
exhaustive enumeration and interval arithmetic.
"""

from __future__ import annotations

import itertools

import numpy as np


def assignment_cost_bruteforce(cost) -> float:
    """Minimum cost of assigning every column (gt) to a distinct row (prediction)."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if m == 0:
        return 0.0
    best = np.inf
    for rows in itertools.permutations(range(n), m):
        total = 0.0
        for j, i in enumerate(rows):
            total += c[i, j]
        best = min(best, total)
    return float(best)


def _interval(lo_a, hi_a, lo_b, hi_b) -> float:
    lo = lo_a if lo_a > lo_b else lo_b
    hi = hi_a if hi_a < hi_b else hi_b
    return hi - lo if hi > lo else 0.0


def iou_interval(a, b) -> float:
    """IoU of two corner boxes, one axis interval at a time."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    inter = 1.0
    va = vb = 1.0
    for k in range(3):
        inter *= _interval(a[k], a[k + 3], b[k], b[k + 3])
        va *= a[k + 3] - a[k]
        vb *= b[k + 3] - b[k]
    return inter / (va + vb - inter)


def giou_interval(a, b) -> float:
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    inter, va, vb, hull = 1.0, 1.0, 1.0, 1.0
    for k in range(3):
        inter *= _interval(a[k], a[k + 3], b[k], b[k + 3])
        va *= a[k + 3] - a[k]
        vb *= b[k + 3] - b[k]
        hull *= max(a[k + 3], b[k + 3]) - min(a[k], b[k])
    union = va + vb - inter
    return inter / union - (hull - union) / hull


def map_bruteforce(cases, iou_thresh: float = 0.1) -> tuple[dict[int, float], float]:
    """Per-class AP and mAP by a direct O(n^2) construction.

    ``cases`` is a list of ``(gt, pred)`` pairs; ``gt`` holds ``(corners, label)``
    and ``pred`` holds ``(corners, label, score)``. Ties in score keep case and
    insertion order.
    """
    classes = sorted({lbl for gt, _ in cases for _, lbl in gt})
    if not classes:
        raise ValueError("no ground truth")
    aps = {}
    for k in classes:
        dets = []
        for ci, (_, pred) in enumerate(cases):
            for pi, (corners, lbl, score) in enumerate([p for p in pred if p[1] == k]):
                dets.append((score, ci, pi, corners))
        # insertion sort by (-score, case, index)
        ordered = []
        for d in dets:
            pos = 0
            while pos < len(ordered) and (-ordered[pos][0], ordered[pos][1], ordered[pos][2]) <= (-d[0], d[1], d[2]):
                pos += 1
            ordered.insert(pos, d)
        taken = {ci: [False] * len([g for g in gt if g[1] == k]) for ci, (gt, _) in enumerate(cases)}
        flags = []
        for score, ci, _, corners in ordered:
            gts = [g[0] for g in cases[ci][0] if g[1] == k]
            best, best_j = -1.0, -1
            for j, g in enumerate(gts):
                if taken[ci][j]:
                    continue
                v = iou_interval(corners, g)
                if v > best:
                    best, best_j = v, j
            if best_j >= 0 and best >= iou_thresh:
                taken[ci][best_j] = True
                flags.append(True)
            else:
                flags.append(False)
        n_gt = sum(len(v) for v in taken.values())
        points = []
        tp = fp = 0
        for f in flags:
            tp += f
            fp += not f
            points.append((tp / n_gt, tp / (tp + fp)))
        ap = 0.0
        prev_r = 0.0
        for r in sorted({p[0] for p in points}):
            p_best = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * p_best
            prev_r = r
        aps[k] = ap
    return aps, sum(aps.values()) / len(aps)


def trilinear_direct(values, loc):
    """8-corner trilinear interpolation, border-clamped, one sample at a time.

    ``values`` ``[D, H, W, C]``, ``loc`` ``[N, 3]`` normalised (voxel ``i``
    centred at ``(i + 0.5) / n``).
    """
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros((len(loc), v.shape[-1]))
    dims = v.shape[:3]
    for s, p in enumerate(np.asarray(loc, dtype=np.float64)):
        x = [min(max(p[k] * dims[k] - 0.5, 0.0), dims[k] - 1.0) for k in range(3)]
        base = [min(int(np.floor(x[k])), dims[k] - 1) for k in range(3)]
        frac = [x[k] - base[k] for k in range(3)]
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            idx = []
            for k in range(3):
                w *= frac[k] if corner[k] else 1.0 - frac[k]
                idx.append(min(base[k] + corner[k], dims[k] - 1))
            out[s] += w * v[tuple(idx)]
    return out


def greedy_merge_reference(boxes, iou_threshold: float):
    """Single greedy clustering pass over ``(corners, label, score)`` triples.

    Returns clusters as sorted lists of input indices.
    """
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i][2])
    clusters: list[list[int]] = []
    for i in order:
        home = None
        for c in clusters:
            f = c[0]
            if boxes[f][1] == boxes[i][1] and iou_interval(boxes[f][0], boxes[i][0]) >= iou_threshold:
                home = c
                break
        if home is None:
            clusters.append([i])
        else:
            home.append(i)
    return sorted(sorted(c) for c in clusters)
