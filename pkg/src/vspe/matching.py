"""Bipartite matching of predictions to ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import pairwise_giou, to_corners


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class MatchAssignment:
    """Injective prediction -> ground-truth pairs, ordered by ground-truth index."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray
    cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(p), int(g)) for p, g in zip(self.pred_idx, self.gt_idx)]

    def __len__(self) -> int:
        return len(self.pred_idx)


def build_cost_matrix(pred_probs, pred_boxes, gt_labels, gt_boxes, weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """Matching cost ``[num_queries, num_gt]``.

    ``cls * -p(label) + l1 * |b_pred - b_gt|_1 + giou * -GIoU``, with boxes in
    normalised center-size form and ``pred_probs`` already softmaxed.
    """
    probs = np.asarray(pred_probs, dtype=np.float64)
    boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 6)
    labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    if len(labels) != len(gts):
        raise ValueError("gt labels and boxes differ in length")
    if len(boxes) < len(gts):
        raise ValueError(f"{len(boxes)} queries cannot cover {len(gts)} ground-truth objects")
    if len(gts) == 0:
        return np.zeros((len(boxes), 0))
    cost_cls = -probs[:, labels]
    cost_l1 = np.abs(boxes[:, None, :] - gts[None, :, :]).sum(-1)
    cost_giou = -pairwise_giou(to_corners(boxes), to_corners(gts))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def _solve(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for ``rows <= cols``.

    Returns the column assigned to every row.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = np.argmin(minv[cols])
            j1 = cols[k]
            delta = minv[j1]
            held = np.nonzero(used)[0]
            u[owner[held]] += delta
            v[held] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            assign[owner[j] - 1] = j - 1
    return assign


def _min_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    cols = _solve(cost)
    return float(sum(cost[i, c] for i, c in enumerate(cols)))


def hungarian(cost, tol: float = 1e-12) -> MatchAssignment:
    """Minimum-cost injective assignment of ground truth (columns) to predictions (rows).

    Among optimal assignments the lexicographically smallest sequence of
    prediction indices (taken in ground-truth order) is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_pred, n_gt = c.shape
    if n_gt == 0:
        return MatchAssignment(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)
    if n_pred < n_gt:
        raise ValueError(f"{n_pred} predictions cannot cover {n_gt} ground-truth objects")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    ct = c.T  # rows = gt, cols = predictions
    best = _min_cost(ct)
    slack = tol * max(1.0, abs(best))
    chosen: list[int] = []
    fixed = 0.0
    free = list(range(n_pred))
    for g in range(n_gt):
        rest = ct[g + 1 :]
        for p in free:
            others = [q for q in free if q != p]
            total = fixed + ct[g, p] + _min_cost(rest[:, others])
            if total <= best + slack:
                chosen.append(p)
                fixed += ct[g, p]
                free = others
                break
        else:  # pragma: no cover - the optimum is always reachable
            raise RuntimeError("tie-break search lost the optimum")
    pred_idx = np.asarray(chosen, dtype=np.int64)
    gt_idx = np.arange(n_gt, dtype=np.int64)
    total = 0.0
    for p, g in zip(pred_idx, gt_idx):
        total += c[p, g]
    return MatchAssignment(pred_idx, gt_idx, float(total))
