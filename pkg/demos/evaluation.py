"""
Mean average precision at IoU 0.1
=================================

A prediction is a hit when it overlaps an unclaimed ground-truth box of its
class with IoU of at least 0.1. AP is the area under the interpolated
precision-recall envelope; mAP averages over classes that occur.
"""

from vspe.evaluation import EvalCase, kfold_split, map_all
from vspe.geometry import GlobalBox

gt = [GlobalBox([0, 0, 0, 4, 4, 4], 0)]
hit, miss = [0, 0, 0, 4, 4, 4], [20, 20, 20, 24, 24, 24]
print("hit scored first:", map_all([EvalCase("v", gt, [GlobalBox(hit, 0, 0.9), GlobalBox(miss, 0, 0.8)])]).map)
print("miss scored first:", map_all([EvalCase("v", gt, [GlobalBox(miss, 0, 0.9), GlobalBox(hit, 0, 0.8)])]).map)

# a coarse box still counts at IoU 0.1
loose = GlobalBox([-2, -2, -2, 6, 6, 6], 0, 0.7)
print("loose box:", map_all([EvalCase("v", gt, [loose])]).map)

# two classes over two volumes
cases = [
    EvalCase("a", [GlobalBox([0, 0, 0, 4, 4, 4], 0), GlobalBox([10, 10, 10, 14, 14, 14], 1)],
             [GlobalBox([0, 0, 0, 4, 4, 4], 0, 0.9), GlobalBox([30, 30, 30, 34, 34, 34], 1, 0.8)]),
    EvalCase("b", [GlobalBox([5, 5, 5, 9, 9, 9], 1)], [GlobalBox([5, 5, 5, 9, 9, 9], 1, 0.6)]),
]
r = map_all(cases)
print("per-class AP", r.per_class, "mAP", round(r.map, 4))

# five-fold split of sixty cases
folds = kfold_split([f"case_{i:04d}" for i in range(60)], 5, seed=0)
print("fold sizes (train, val):", [(len(t), len(v)) for t, v in folds])
