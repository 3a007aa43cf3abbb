"""
Reverse-mode autodiff and finite-difference checks
==================================================

Every layer in the detectors is built from a small set of differentiable
numpy primitives. Each one is checked against central differences.
"""

import numpy as np

from vspe import tensor as T
from vspe.tensor import Tensor
from vspe.verify import gradcheck, model_loss_check

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
loss = T.softmax(T.matmul(x, w), axis=-1)[:, 0].sum()
loss.backward()
print("d loss / d w:\n", np.round(w.grad, 4))

# the same gradient, checked numerically
err = gradcheck(lambda x, w: T.softmax(T.matmul(x, w), axis=-1)[:, 0].sum(), [x.data, w.data])
print(f"softmax(xW) relative error: {err:.2e}")

# a 3D convolution over a small volume
vol = rng.normal(size=(1, 2, 5, 5, 5))
ker = rng.normal(size=(3, 2, 3, 3, 3))
err = gradcheck(lambda v, k: (T.conv3d(v, k, padding=1) ** 2).sum(), [vol, ker])
print(f"conv3d relative error: {err:.2e}")

# trilinear sampling, the core of deformable attention
grid = rng.normal(size=(1, 4, 4, 4, 2))
loc = rng.uniform(0.2, 0.8, size=(1, 5, 3))
err = gradcheck(lambda g, l: T.grid_sample3d(g, l).sum(), [grid, loc])
print(f"grid_sample3d relative error: {err:.2e}")

# the whole detector loss (matching, set loss, denoising) for each variant
for variant in ("detr", "cond", "dino"):
    print(f"{variant} full-model loss relative error: {model_loss_check(variant, seed=0):.2e}")
