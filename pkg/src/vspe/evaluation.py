"""Average precision at an IoU threshold, k-fold splits and results files.

Results file (JSON)::

    {
      "iou_threshold": 0.1,
      "folds": [{"fold": 0, "per_class": {"0": 0.83}, "map": 0.83, "num_cases": 12}],
      "map_mean": 0.83
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GlobalBox, pairwise_iou

DEFAULT_IOU = 0.1


@dataclass
class EvalCase:
    volume_id: str
    gt: list[GlobalBox]
    pred: list[GlobalBox]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray


@dataclass
class EvalResult:
    per_class: dict[int, float]
    map: float
    curves: dict[int, PRCurve] = field(default_factory=dict)
    iou_threshold: float = DEFAULT_IOU


def _check_ids(cases) -> None:
    ids = [c.volume_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique within an evaluation")


def match_detections(cases, cls: int, iou_thresh: float = DEFAULT_IOU):
    """Greedy score-ordered matching of class ``cls`` predictions.

    Predictions are visited by descending score, ties broken by case order and
    then insertion order. Each one takes the unmatched ground truth box of its
    own volume with the highest IoU (lowest index on ties), if that IoU reaches
    ``iou_thresh``.

    Returns:
        ``(scores, is_tp, num_gt)`` with the first two in visiting order.
    """
    _check_ids(cases)
    entries = []  # (score, case position, insertion index)
    gts = []
    for ci, case in enumerate(cases):
        g = np.array([b.corners for b in case.gt if b.label == cls]).reshape(-1, 6)
        gts.append(g)
        for pi, p in enumerate(b for b in case.pred if b.label == cls):
            entries.append((p.score, ci, pi, p.corners))
    num_gt = sum(len(g) for g in gts)
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][0], entries[i][1], entries[i][2]))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        score, ci, _, corners = entries[i]
        scores[rank] = score
        g = gts[ci]
        if not len(g):
            continue
        iou = pairwise_iou(corners[None], g)[0]
        iou[used[ci]] = -1.0
        j = int(np.argmax(iou))
        if iou[j] >= iou_thresh:
            used[ci][j] = True
            tp[rank] = True
    return scores, tp, num_gt


def precision_recall(tp: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / num_gt
    return recall, precision


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision envelope."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    # envelope: running max from the right
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


def ap_at_iou(cases, cls: int, iou_thresh: float = DEFAULT_IOU) -> float | None:
    """AP of class ``cls``; ``None`` when no case holds ground truth of that class."""
    ap, _ = _ap_and_curve(cases, cls, iou_thresh)
    return ap


def _ap_and_curve(cases, cls, iou_thresh):
    scores, tp, num_gt = match_detections(cases, cls, iou_thresh)
    if num_gt == 0:
        return None, None
    if not len(tp):
        return 0.0, PRCurve(np.zeros(0), np.zeros(0), scores)
    recall, precision = precision_recall(tp, num_gt)
    return envelope_ap(recall, precision), PRCurve(recall, precision, scores)


def map_all(cases, iou_thresh: float = DEFAULT_IOU) -> EvalResult:
    """Mean AP over the classes present in the ground truth."""
    classes = sorted({b.label for c in cases for b in c.gt})
    if not classes:
        raise ValueError("no ground truth boxes in any case; mAP is undefined")
    per_class, curves = {}, {}
    for k in classes:
        ap, curve = _ap_and_curve(cases, k, iou_thresh)
        per_class[k] = ap
        curves[k] = curve
    mean = float(np.mean([per_class[k] for k in classes]))
    return EvalResult(per_class, mean, curves, iou_thresh)


def kfold_split(case_ids, k: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    """``k`` (train, val) partitions; validation folds are disjoint and differ in size by at most one."""
    ids = list(case_ids)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} cases into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(perm, k)
    out = []
    for f in folds:
        val = set(f.tolist())
        out.append(([ids[i] for i in range(len(ids)) if i not in val], [ids[i] for i in sorted(val)]))
    return out


def results_record(fold_results: list[tuple[int, EvalResult, int]]) -> dict:
    """Results-file structure from ``(fold, result, num_cases)`` triples."""
    if not fold_results:
        raise ValueError("no fold results")
    iou = fold_results[0][1].iou_threshold
    folds = [{"fold": int(f), "per_class": {str(k): float(v) for k, v in sorted(r.per_class.items())},
              "map": float(r.map), "num_cases": int(n)} for f, r, n in fold_results]
    return {"iou_threshold": float(iou), "folds": folds,
            "map_mean": float(np.mean([f["map"] for f in folds]))}


def write_results(record: dict, path) -> None:
    Path(path).write_text(json.dumps(record, indent=2) + "\n")


def read_results(path) -> dict:
    return json.loads(Path(path).read_text())
