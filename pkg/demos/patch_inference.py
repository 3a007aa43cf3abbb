"""
Patch-wise inference and duplicate merging
==========================================

Whole volumes are tiled into overlapping patches. An object that lies in an
overlap is found once per patch; merging collapses the copies afterwards.
"""

import numpy as np

from vspe.geometry import GlobalBox
from vspe.models.detectors import DetectionSet, ModelOutput
from vspe.patches import MergeConfig, merge_predictions, sliding_infer, tile_volume
from vspe.tensor import Tensor


class Thresholder:
    """Stand-in detector: one query boxing the voxels brighter than 0.5."""

    def forward(self, batch, train=False):
        n, size = batch.shape[0], np.array(batch.shape[2:], float)
        logits = np.tile([[-10.0, 10.0]], (n, 1, 1))
        boxes = np.tile([[0.5, 0.5, 0.5, 0.1, 0.1, 0.1]], (n, 1, 1))
        for i in range(n):
            idx = np.nonzero(batch[i, 0] > 0.5)
            if len(idx[0]):
                lo = np.array([a.min() for a in idx])
                hi = np.array([a.max() + 1 for a in idx])
                boxes[i, 0] = np.concatenate([(lo + hi) / 2 / size, (hi - lo) / size])
                logits[i, 0] = [10.0, -10.0]
        return ModelOutput([DetectionSet(Tensor(logits), Tensor(boxes))])


grid = tile_volume((96, 96, 96), (64, 64, 64), overlap=0.5)
print(len(grid), "patches at offsets", sorted({o[0] for o in grid.offsets}))

vol = np.zeros((48, 32, 32))
vol[18:30, 10:20, 10:20] = 1.0  # inside both patches along axis 0
grid = tile_volume(vol.shape, (32, 32, 32), overlap=0.5)
raw = sliding_infer(Thresholder(), vol, grid)
print("raw detections:", [b.corners.tolist() for b in raw])
merged = merge_predictions(raw)
print("merged:", [(b.corners.tolist(), round(b.score, 3)) for b in merged])

# fusion rules and idempotence
pair = [GlobalBox([0, 0, 0, 4, 4, 4], 0, 0.9), GlobalBox([0.5, 0, 0, 4.5, 4, 4], 0, 0.6)]
for fusion in ("mean", "max"):
    out = merge_predictions(pair, MergeConfig(fusion=fusion))
    print(fusion, "->", out[0].corners.round(3).tolist(), round(out[0].score, 3))
once = merge_predictions(pair)
print("merging twice changes nothing:", np.array_equal(merge_predictions(once)[0].corners, once[0].corners))
