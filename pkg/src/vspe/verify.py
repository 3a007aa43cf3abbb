"""Finite-difference gradient checks and brute-force oracle comparisons."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from . import tensor as T
from .evaluation import EvalCase, map_all
from .geometry import GlobalBox, giou3d, giou_tensor, iou3d, to_center_size
from .losses import LossConfig, batch_set_loss, cross_entropy, denoising_loss, focal_loss, match_predictions
from .matching import hungarian
from .models.config import ModelConfig
from .models.detectors import build_model
from .nn import attention
from .tensor import Tensor

H = 1e-5
GRAD_TOL = 1e-4


def relative_error(a, n) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` wrt every entry of ``arrays`` (modified in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(fn, inputs: list[np.ndarray], h: float = H) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` takes Tensors and returns a scalar Tensor.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    out.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    def f():
        with T.no_grad():
            return fn(*[Tensor(leaf.data) for leaf in leaves]).data

    numeric = numeric_grad(f, [leaf.data for leaf in leaves], h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _away_from(x: np.ndarray, points, margin: float = 1e-2) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.where(x >= p, margin, -margin) * 2, x)
    return x


def _cell_interior_points(rng, dims, shape) -> np.ndarray:
    """Normalised sample locations away from trilinear cell edges; the last one lies past the border."""
    n = np.asarray(dims, dtype=np.float64)
    cell = np.floor(rng.uniform(0, 1, size=shape + (3,)) * np.maximum(n - 1, 1))
    p = cell + rng.uniform(0.05, 0.95, size=shape + (3,))
    loc = (p + 0.5) / n
    loc[:, -1] = rng.choice([-0.3, 1.3], size=(shape[0], 3))
    return loc


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _primitive_cases(rng: np.random.Generator):
    """(name, fn, inputs) triples for one seed; every fn returns a scalar."""
    s = (3, 4)
    w = _weights(rng, s)
    a = rng.normal(size=s)
    b = rng.normal(size=s)
    pos = rng.uniform(0.5, 2.0, size=s)
    w_stack = Tensor(rng.normal(size=(2, 3, 8)))
    w_grid = Tensor(rng.normal(size=(2, 5, 3)))
    w_attn = Tensor(rng.normal(size=(2, 3, 4)))
    cases = [
        ("add", lambda x, y: ((x + y) * w).sum(), [a, rng.normal(size=(4,))]),
        ("sub", lambda x, y: ((x - y) * w).sum(), [a, b]),
        ("mul", lambda x, y: ((x * y) * w).sum(), [a, b]),
        ("div", lambda x, y: ((x / y) * w).sum(), [a, pos]),
        ("pow", lambda x: ((x ** 3) * w).sum(), [a]),
        ("neg", lambda x: ((-x) * w).sum(), [a]),
        ("matmul", lambda x, y: (x @ y).sum() * 0.5 + ((x @ y) ** 2).sum(), [a, rng.normal(size=(4, 2))]),
        ("exp", lambda x: (x.exp() * w).sum(), [a]),
        ("log", lambda x: (x.log() * w).sum(), [pos]),
        ("sqrt", lambda x: (x.sqrt() * w).sum(), [pos]),
        ("sin", lambda x: (x.sin() * w).sum(), [a]),
        ("cos", lambda x: (x.cos() * w).sum(), [a]),
        ("sigmoid", lambda x: (x.sigmoid() * w).sum(), [a]),
        ("tanh", lambda x: (x.tanh() * w).sum(), [a]),
        ("relu", lambda x: (x.relu() * w).sum(), [_away_from(a, [0.0])]),
        ("abs", lambda x: (x.abs() * w).sum(), [_away_from(a, [0.0])]),
        ("clamp", lambda x: (x.clamp(-0.5, 0.5) * w).sum(), [_away_from(a, [-0.5, 0.5])]),
        ("inverse_sigmoid", lambda x: (x.inverse_sigmoid() * w).sum(), [rng.uniform(0.1, 0.9, size=s)]),
        ("sum_axis", lambda x: (x.sum(axis=0) ** 2).sum(), [a]),
        ("mean", lambda x: (x.mean(axis=1) * w[:, 0]).sum(), [a]),
        ("reshape_transpose", lambda x: (x.reshape(2, 6).transpose(1, 0) * w.reshape(6, 2)).sum(), [a]),
        ("getitem", lambda x: (x[np.array([0, 2, 0]), 1:3] ** 2).sum(), [a]),
        ("concat_stack", lambda x, y: (T.stack([T.concat([x, y], axis=1), T.concat([y, x], axis=1)]) ** 2
                                       * w_stack).sum(), [a, b]),
        ("where_max_min", lambda x, y: (T.where(a > 0, x, y) * w).sum() + (T.maximum(x, y) - T.minimum(x, y)).sum(),
         [a, b]),
        ("softmax", lambda x: (T.softmax(x, axis=-1) * w).sum(), [a]),
        ("masked_softmax", lambda x: (T.softmax(x, axis=-1, mask=np.array([False, True, False, False])) * w).sum(),
         [a]),
        ("log_softmax", lambda x: (T.log_softmax(x, axis=-1) * w).sum(), [a]),
        ("layer_norm", lambda x, g, c: (T.layer_norm(x, g, c) * w).sum(),
         [a, rng.normal(size=(4,)), rng.normal(size=(4,))]),
        ("conv3d", lambda x, k, c: (T.conv3d(x, k, c, stride=2, padding=1) ** 2).sum(),
         [rng.normal(size=(1, 2, 5, 4, 4)), rng.normal(size=(3, 2, 3, 3, 3)) * 0.3, rng.normal(size=(3,))]),
        ("grid_sample3d", lambda v, p: (T.grid_sample3d(v, p) * w_grid).sum(),
         [rng.normal(size=(2, 3, 4, 2, 3)), _cell_interior_points(rng, (3, 4, 2), (2, 5))]),
        ("attention", lambda q, k, v: (attention(q, k, v)[0] * w_attn).sum(),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))]),
        ("giou", lambda x, y: giou_tensor(x, y).sum(),
         [np.concatenate([rng.uniform(0.3, 0.7, (4, 3)), rng.uniform(0.1, 0.4, (4, 3))], 1),
          np.concatenate([rng.uniform(0.3, 0.7, (4, 3)), rng.uniform(0.1, 0.4, (4, 3))], 1)]),
    ]
    target = rng.integers(0, 3, size=5)
    cases.append(("focal", lambda x: focal_loss(x, target, 0.25, 2.0), [rng.normal(size=(5, 3))]))
    cases.append(("cross_entropy", lambda x: cross_entropy(x, target, np.array([1.0, 1.0, 0.1])),
                  [rng.normal(size=(5, 3))]))
    return cases


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_error: float
    passed: bool


def primitive_suite(seeds: int = 100, tol: float = GRAD_TOL) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _primitive_cases(rng):
            err = gradcheck(fn, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, seeds, v, v < tol) for k, v in worst.items()]


def gradcheck_model_config(variant: str, seed: int = 0) -> ModelConfig:
    """Smallest configuration exercising every layer of a variant (float64)."""
    kw = dict(variant=variant, hidden_dim=12, ffn_dim=16, heads=2, enc_layers=1, dec_layers=1,
              num_queries=4, num_classes=1, patch_size=(8, 8, 8), backbone_channels=(4, 4),
              stem_channels=2, dtype="float64", init_seed=seed, num_points=2)
    if variant == "dino":
        kw.update(num_dn=4, num_levels=2, box_noise_scale=0.4)
    return ModelConfig(**kw)


def model_loss_check(variant: str, seed: int, h: float = H) -> float:
    """Directional-derivative check of the full training loss wrt all parameters.

    Matching, denoising noise, query selection, stop-gradient values and the
    branch of every piecewise op are taken at the unperturbed point and held
    fixed, so the differences are taken on the smooth piece the gradient
    describes.
    """
    cfg = gradcheck_model_config(variant, seed)
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 1000)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0, 0.05, size=p.shape)  # leave the zero-inits
    patch = rng.normal(size=(2, 1) + cfg.patch_size)
    targets = []
    for _ in range(2):
        n = int(rng.integers(1, 3))
        c = rng.uniform(0.3, 0.7, size=(n, 3))
        s = rng.uniform(0.15, 0.35, size=(n, 3))
        targets.append((np.zeros(n, dtype=np.int64), np.concatenate([c, s], 1)))
    lc = LossConfig()
    state = {}

    def loss_fn():
        out = model.forward(patch, train=True, targets=targets, rng=np.random.default_rng(seed))
        sets = list(out.layers) + ([out.enc] if out.enc is not None else [])
        if "asg" not in state:
            state["asg"] = [[match_predictions(d.logits.data[b], d.boxes.data[b], *targets[b])
                             for b in range(len(targets))] for d in sets]
        total = None
        for d, asg in zip(sets, state["asg"]):
            t = batch_set_loss(d.logits, d.boxes, targets, asg, variant, lc)["total"]
            total = t if total is None else total + t
        for d in out.dn_layers:
            total = total + denoising_loss(d.logits, d.boxes, out.dn, variant, lc)["total"]
        return total

    tape = T.PieceTape()
    params = [p for _, p in model.named_parameters()]
    model.zero_grad()
    with T.piece_tape(tape):
        loss = loss_fn()
    loss.backward()
    direction = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
    direction = [d / norm for d in direction]  # unit step length h, as in a per-coordinate check
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, direction))
    base = [p.data.copy() for p in params]

    def at(step):
        for p, b, d in zip(params, base, direction):
            p.data = b + step * d
        tape.replay()
        with T.no_grad(), T.piece_tape(tape):
            return float(loss_fn().data)

    numeric = (at(h) - at(-h)) / (2 * h)
    for p, b in zip(params, base):
        p.data = b
    return relative_error(analytic, numeric)


def model_suite(seeds: int = 100, tol: float = GRAD_TOL, variants=("detr", "cond", "dino")) -> list[CheckResult]:
    out = []
    for v in variants:
        worst = max(model_loss_check(v, s) for s in range(seeds))
        out.append(CheckResult(f"model_loss_{v}", seeds, worst, worst < tol))
    return out


def run_gradcheck(seeds: int = 100, model_seeds: int | None = None) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = primitive_suite(seeds) + model_suite(seeds if model_seeds is None else model_seeds)
    return res, time.perf_counter() - t0


# -- oracle comparisons ------------------------------------------------------------------------------


def random_corner_boxes(rng, n: int, scale: float = 10.0) -> np.ndarray:
    lo = rng.uniform(0, scale, size=(n, 3))
    return np.concatenate([lo, lo + rng.uniform(0.1, scale / 2, size=(n, 3))], 1)


def hungarian_oracle_check(seeds: int = 200, max_n: int = 7) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(0, n + 1))
        cost = rng.normal(size=(n, m))
        if seed % 4 == 0:
            cost = np.round(cost * 2)  # integer costs, many ties
        got = hungarian(cost).cost
        want = oracles.assignment_cost_bruteforce(cost)
        worst = max(worst, abs(got - want))
    return CheckResult("hungarian_vs_enumeration", seeds, worst, worst == 0.0)


def geometry_oracle_check(pairs: int = 1000) -> CheckResult:
    rng = np.random.default_rng(0)
    a = random_corner_boxes(rng, pairs)
    b = random_corner_boxes(rng, pairs)
    worst = 0.0
    for x, y in zip(a, b):
        cx, cy = to_center_size(x), to_center_size(y)
        worst = max(worst, abs(iou3d(cx, cy) - oracles.iou_interval(x, y)),
                    abs(giou3d(cx, cy) - oracles.giou_interval(x, y)))
    # unit cubes offset by half a side along one axis
    unit = abs(iou3d([0.5, 0.5, 0.5, 1, 1, 1], [1.0, 0.5, 0.5, 1, 1, 1]) - 1.0 / 3.0)
    worst = max(worst, unit)
    return CheckResult("iou_giou_vs_interval", pairs, worst, worst <= 1e-12)


def random_eval_instance(rng, max_boxes: int = 20, max_classes: int = 3):
    k = int(rng.integers(1, max_classes + 1))
    n_cases = int(rng.integers(1, 4))
    total = int(rng.integers(1, max_boxes + 1))
    cases = []
    for ci in range(n_cases):
        share = total // n_cases
        gt = [GlobalBox(c, int(rng.integers(k)), 1.0) for c in random_corner_boxes(rng, max(share // 2, 1))]
        pred = []
        for _ in range(max(share - len(gt), 0)):
            if gt and rng.uniform() < 0.6:
                g = gt[int(rng.integers(len(gt)))]
                c = g.corners + rng.normal(0, 0.8, size=6)
                c[3:] = np.maximum(c[3:], c[:3] + 0.1)
                label = g.label if rng.uniform() < 0.8 else int(rng.integers(k))
            else:
                c = random_corner_boxes(rng, 1)[0]
                label = int(rng.integers(k))
            score = float(np.round(rng.uniform(), 1))  # coarse scores force ties
            pred.append(GlobalBox(c, label, score))
        cases.append(EvalCase(f"v{ci}", gt, pred))
    return cases


def ap_oracle_check(seeds: int = 100) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        cases = random_eval_instance(rng)
        got = map_all(cases, 0.1)
        plain = [([(g.corners, g.label) for g in c.gt], [(p.corners, p.label, p.score) for p in c.pred])
                 for c in cases]
        aps, m = oracles.map_bruteforce(plain, 0.1)
        worst = max(worst, abs(got.map - m), *(abs(got.per_class[k] - aps[k]) for k in aps))
    return CheckResult("map_vs_bruteforce", seeds, worst, worst <= 1e-12)


def run_oracle_suite() -> list[CheckResult]:
    return [hungarian_oracle_check(), geometry_oracle_check(), ap_oracle_check()]
