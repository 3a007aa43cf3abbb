"""
Boxes, overlap and set matching
===============================

A detector emits a fixed set of boxes. Training pairs each ground-truth
object with exactly one prediction, and everything else learns "no object".
"""

import numpy as np

from vspe.geometry import Box3D, giou3d, iou3d
from vspe.losses import LossConfig, match_predictions, set_loss
from vspe.matching import build_cost_matrix, hungarian
from vspe.tensor import Tensor

# boxes are normalised (cx, cy, cz, w, h, d)
a = Box3D(0.5, 0.5, 0.5, 0.2, 0.2, 0.2)
b = Box3D(0.55, 0.5, 0.5, 0.2, 0.2, 0.2)
far = Box3D(0.9, 0.9, 0.9, 0.1, 0.1, 0.1)
print("corners of a:", a.to_corners())
print(f"IoU(a, b) = {iou3d(a, b):.4f}   GIoU(a, b) = {giou3d(a, b):.4f}")
# disjoint boxes all have IoU 0, but GIoU still says how far apart they are
print(f"IoU(a, far) = {iou3d(a, far):.4f}   GIoU(a, far) = {giou3d(a, far):.4f}")

# four queries, two objects
probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
pred = np.array([[0.5, 0.5, 0.5, 0.2, 0.2, 0.2],
                 [0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
                 [0.3, 0.3, 0.3, 0.1, 0.1, 0.1],
                 [0.8, 0.8, 0.8, 0.1, 0.1, 0.1]])
gt_labels = np.array([0, 0])
gt_boxes = np.array([[0.3, 0.3, 0.3, 0.1, 0.1, 0.1], [0.5, 0.5, 0.5, 0.2, 0.2, 0.2]])
cost = build_cost_matrix(probs, pred, gt_labels, gt_boxes)
print("cost matrix (queries x objects):\n", np.round(cost, 3))
asg = hungarian(cost)
print("pairs (query, object):", asg.pairs, " total cost", round(asg.cost, 4))

# the set loss of a prediction depends on the matching, not the query order
logits = Tensor(np.log(probs), requires_grad=True)
boxes = Tensor(pred, requires_grad=True)
for variant in ("detr", "dino"):
    m = match_predictions(logits, boxes, gt_labels, gt_boxes)
    loss = set_loss(logits, boxes, gt_labels, gt_boxes, m, variant, LossConfig())
    print(f"{variant} set loss {float(loss.data):.4f}")
perm = [3, 1, 0, 2]
m = match_predictions(logits.data[perm], pred[perm], gt_labels, gt_boxes)
print("after shuffling the queries the match follows them:", m.pairs)
