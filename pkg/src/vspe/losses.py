"""Set-prediction losses, focal loss and denoising queries.

Class logits always carry ``num_classes + 1`` columns, the last being the
"no object" class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import giou_tensor
from .matching import MatchAssignment, MatchWeights, build_cost_matrix, hungarian
from .tensor import Tensor

VARIANTS = ("detr", "cond", "dino")


@dataclass(frozen=True)
class LossConfig:
    """Loss weights. ``cls`` defaults follow the usual per-variant convention."""

    cls: float | None = None
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    eos_coef: float = 0.1
    match: MatchWeights = field(default_factory=MatchWeights)

    def cls_weight(self, variant: str) -> float:
        if self.cls is not None:
            return self.cls
        return 1.0 if variant == "detr" else 2.0


def uses_focal(variant: str) -> bool:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return variant != "detr"


def _gather_logp(logits: Tensor, target: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    flat = logp.reshape(-1, logp.shape[-1])
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    return flat[np.arange(len(t)), t].reshape(target.shape)


def focal_loss(logits, target, alpha: float = 0.25, gamma: float = 2.0,
               background: int | None = None, reduction: str = "sum") -> Tensor:
    """Softmax focal loss ``-a_t (1 - p_t)^gamma log p_t``.

    ``a_t`` is ``alpha`` for object targets and ``1 - alpha`` for the
    ``background`` column (default: the last one).
    """
    if gamma < 0 or not 0 <= alpha <= 1:
        raise ValueError("focal loss needs gamma >= 0 and alpha in [0, 1]")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    bg = logits.shape[-1] - 1 if background is None else background
    logp_t = _gather_logp(logits, target)
    a_t = np.where(target == bg, 1.0 - alpha, alpha).astype(logits.dtype)
    loss = -logp_t * a_t
    if gamma > 0:
        loss = loss * (1.0 - logp_t.exp()) ** gamma
    return _reduce(loss, reduction)


def cross_entropy(logits, target, class_weight=None, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``mean`` is the class-weighted mean."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    logp_t = _gather_logp(logits, target)
    w = np.ones(target.shape) if class_weight is None else np.asarray(class_weight)[target]
    w = w.astype(logits.dtype)
    loss = -logp_t * w
    if reduction == "mean":
        return loss.sum() * (1.0 / max(float(w.sum()), 1e-12))
    return _reduce(loss, reduction)


def _reduce(loss: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def match_predictions(logits, boxes, gt_labels, gt_boxes, weights: MatchWeights = MatchWeights()) -> MatchAssignment:
    """Hungarian match of one sample's predictions (arrays or Tensors)."""
    logit_arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    box_arr = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes)
    z = logit_arr - logit_arr.max(-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    return hungarian(build_cost_matrix(probs, box_arr, gt_labels, gt_boxes, weights))


def batch_set_loss(logits: Tensor, boxes: Tensor, targets, assignments, variant: str,
                   cfg: LossConfig = LossConfig(), num_boxes: float | None = None) -> dict[str, Tensor]:
    """Set loss for a batch given per-sample assignments.

    Args:
        logits: ``[B, Q, K + 1]``.
        boxes: ``[B, Q, 6]`` normalised center-size predictions.
        targets: per-sample ``(labels [M], boxes [M, 6])``.
        assignments: per-sample ``MatchAssignment``.
        num_boxes: normaliser for the box terms (and focal classification);
            defaults to the total number of ground-truth objects, at least 1.

    Returns:
        ``{"cls", "l1", "giou", "total"}`` where ``total`` is the weighted sum.
    """
    B, Q, C = logits.shape
    bg = C - 1
    if len(targets) != B or len(assignments) != B:
        raise ValueError("targets/assignments do not match the batch size")
    target_cls = np.full((B, Q), bg, dtype=np.int64)
    b_idx, q_idx, gt_rows = [], [], []
    for b, ((labels, gts), a) in enumerate(zip(targets, assignments)):
        labels = np.asarray(labels, dtype=np.int64)
        if len(a.pred_idx) and (a.pred_idx.max() >= Q or a.gt_idx.max() >= len(labels)):
            raise IndexError("assignment index out of range")
        target_cls[b, a.pred_idx] = labels[a.gt_idx]
        b_idx.extend([b] * len(a))
        q_idx.extend(a.pred_idx.tolist())
        gt_rows.extend(np.asarray(gts, dtype=np.float64).reshape(-1, 6)[a.gt_idx])
    n = float(len(b_idx))
    norm = max(n if num_boxes is None else float(num_boxes), 1.0)
    if uses_focal(variant):
        cls = focal_loss(logits, target_cls, cfg.focal_alpha, cfg.focal_gamma) * (1.0 / norm)
    else:
        weight = np.ones(C)
        weight[bg] = cfg.eos_coef
        cls = cross_entropy(logits, target_cls, weight)
    if b_idx:
        src = boxes[np.asarray(b_idx), np.asarray(q_idx)]
        tgt = Tensor(np.asarray(gt_rows), dtype=boxes.dtype)
        l1 = (src - tgt).abs().sum() * (1.0 / norm)
        giou = (1.0 - giou_tensor(src, tgt)).sum() * (1.0 / norm)
    else:
        l1 = giou = Tensor(np.zeros((), dtype=boxes.dtype))
    total = cls * cfg.cls_weight(variant) + l1 * cfg.l1 + giou * cfg.giou
    return {"cls": cls, "l1": l1, "giou": giou, "total": total}


def set_loss(logits: Tensor, boxes: Tensor, gt_labels, gt_boxes, assignment: MatchAssignment,
             variant: str, cfg: LossConfig = LossConfig()) -> Tensor:
    """Single-sample set loss; ``logits`` ``[Q, K + 1]``, ``boxes`` ``[Q, 6]``."""
    out = batch_set_loss(logits.unsqueeze(0), boxes.unsqueeze(0), [(gt_labels, gt_boxes)],
                         [assignment], variant, cfg)
    return out["total"]


# -- denoising -----------------------------------------------------------------


@dataclass
class DenoisingGroup:
    group_id: int
    boxes: np.ndarray  # noised queries, [M, 6]
    labels: np.ndarray  # possibly flipped, [M]
    target_boxes: np.ndarray
    target_labels: np.ndarray
    positive: np.ndarray  # [M] bool; negatives are not generated

    def __len__(self) -> int:
        return len(self.labels)


def make_denoising_groups(gt_labels, gt_boxes, num_dn: int, box_noise_scale: float,
                          label_flip_prob: float, num_classes: int, rng: np.random.Generator,
                          slots: int | None = None) -> list[DenoisingGroup]:
    """Jittered copies of the ground truth, ``num_dn // slots`` groups of them.

    Centers and extents each move by ``U(-1, 1) * scale * extent``; labels
    are resampled uniformly with probability ``label_flip_prob``. ``slots``
    (default: the number of objects) is the group width used when samples
    are batched together.
    """
    if num_dn < 0:
        raise ValueError("num_dn must be >= 0")
    labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    m = len(labels)
    width = max(m if slots is None else slots, 1)
    if m == 0 or num_dn == 0:
        return []
    num_groups = max(num_dn // width, 1)
    groups = []
    for g in range(num_groups):
        ext = np.concatenate([boxes[:, 3:], boxes[:, 3:]], axis=1)
        noise = rng.uniform(-1.0, 1.0, size=(m, 6)) * box_noise_scale * ext
        noised = boxes + noise
        noised[:, :3] = np.clip(noised[:, :3], 0.0, 1.0)
        noised[:, 3:] = np.clip(noised[:, 3:], 1e-3, 1.0)
        flip = rng.random(m) < label_flip_prob
        new_labels = np.where(flip, rng.integers(0, num_classes, size=m), labels)
        groups.append(DenoisingGroup(g, noised, new_labels, boxes.copy(), labels.copy(), np.ones(m, bool)))
    return groups


def denoising_attention_mask(group_sizes, num_queries: int) -> np.ndarray:
    """Blocked-pair mask for ``[dn queries..., matching queries]``.

    Matching queries never see denoising queries and denoising groups never
    see each other; denoising queries can see the matching ones.
    """
    n_dn = int(sum(group_sizes))
    total = n_dn + num_queries
    mask = np.zeros((total, total), dtype=bool)
    mask[n_dn:, :n_dn] = True
    start = 0
    for size in group_sizes:
        end = start + size
        mask[start:end, :start] = True
        mask[start:end, end:n_dn] = True
        start = end
    return mask


@dataclass
class DenoisingBatch:
    """Denoising queries for a whole batch, padded to a common width."""

    boxes: np.ndarray  # [B, N, 6] noised references
    labels: np.ndarray  # [B, N] noised labels
    target_boxes: np.ndarray
    target_labels: np.ndarray
    valid: np.ndarray  # [B, N]
    num_groups: int
    group_size: int
    attn_mask: np.ndarray  # [B, N + Q, N + Q]

    @property
    def num_dn(self) -> int:
        return self.boxes.shape[1]


def build_denoising_batch(targets, num_dn: int, num_queries: int, num_classes: int,
                          box_noise_scale: float, label_flip_prob: float,
                          rng: np.random.Generator) -> DenoisingBatch | None:
    width = max((len(np.asarray(lbl).reshape(-1)) for lbl, _ in targets), default=0)
    if num_dn <= 0 or width == 0:
        return None
    B = len(targets)
    num_groups = max(num_dn // width, 1)
    N = num_groups * width
    boxes = np.tile(np.array([0.5, 0.5, 0.5, 0.1, 0.1, 0.1]), (B, N, 1))
    labels = np.zeros((B, N), dtype=np.int64)
    t_boxes = boxes.copy()
    t_labels = np.zeros((B, N), dtype=np.int64)
    valid = np.zeros((B, N), dtype=bool)
    for b, (lbl, bx) in enumerate(targets):
        groups = make_denoising_groups(lbl, bx, num_dn, box_noise_scale, label_flip_prob,
                                       num_classes, rng, slots=width)
        for grp in groups:
            s = grp.group_id * width
            m = len(grp)
            boxes[b, s : s + m] = grp.boxes
            labels[b, s : s + m] = grp.labels
            t_boxes[b, s : s + m] = grp.target_boxes
            t_labels[b, s : s + m] = grp.target_labels
            valid[b, s : s + m] = True
    base = denoising_attention_mask([width] * num_groups, num_queries)
    mask = np.repeat(base[None], B, axis=0)
    # padded slots are never attended to
    mask[:, :, :N] |= ~valid[:, None, :]
    return DenoisingBatch(boxes, labels, t_boxes, t_labels, valid, num_groups, width, mask)


def denoising_loss(dn_logits: Tensor, dn_boxes: Tensor, dn: DenoisingBatch | None, variant: str,
                   cfg: LossConfig = LossConfig()) -> dict[str, Tensor]:
    """Per-pair set loss on the known query -> object correspondence."""
    if dn is None or dn_logits is None:
        zero = Tensor(np.zeros(()))
        return {"cls": zero, "l1": zero, "giou": zero, "total": zero}
    if dn_logits.shape[:2] != dn.valid.shape or dn_boxes.shape[:2] != dn.valid.shape:
        raise ValueError(f"denoising outputs {dn_logits.shape[:2]} vs groups {dn.valid.shape}")
    b_idx, q_idx = np.nonzero(dn.valid)
    norm = max(float(len(b_idx)), 1.0)
    logits = dn_logits[b_idx, q_idx]
    target = dn.target_labels[b_idx, q_idx]
    if uses_focal(variant):
        cls = focal_loss(logits, target, cfg.focal_alpha, cfg.focal_gamma) * (1.0 / norm)
    else:
        cls = cross_entropy(logits, target)
    src = dn_boxes[b_idx, q_idx]
    tgt = Tensor(dn.target_boxes[b_idx, q_idx], dtype=dn_boxes.dtype)
    l1 = (src - tgt).abs().sum() * (1.0 / norm)
    giou = (1.0 - giou_tensor(src, tgt)).sum() * (1.0 / norm)
    total = cls * cfg.cls_weight(variant) + l1 * cfg.l1 + giou * cfg.giou
    return {"cls": cls, "l1": l1, "giou": giou, "total": total}
