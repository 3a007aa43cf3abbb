import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vspe.geometry import to_corners
from vspe.losses import (
    LossConfig,
    build_denoising_batch,
    cross_entropy,
    denoising_attention_mask,
    denoising_loss,
    focal_loss,
    make_denoising_groups,
    match_predictions,
    set_loss,
)
from vspe.matching import MatchWeights, build_cost_matrix, hungarian
from vspe.models.config import DATASET_PRESETS, preset_model
from vspe.oracles import assignment_cost_bruteforce, giou_interval
from vspe.tensor import Tensor
from vspe.verify import gradcheck


def rand_boxes(rng, n):
    return np.concatenate([rng.uniform(0.2, 0.8, (n, 3)), rng.uniform(0.05, 0.3, (n, 3))], axis=1)


def test_cost_single_perfect_pair():
    b = np.array([[0.5, 0.5, 0.5, 0.2, 0.2, 0.2]])
    c = build_cost_matrix(np.array([[1.0, 0.0]]), b, [0], b)
    w = MatchWeights()
    assert c.shape == (1, 1)
    assert abs(c[0, 0] - (-w.cls - w.giou)) < 1e-15


def test_cost_symmetric_rows():
    b = rand_boxes(np.random.default_rng(0), 1)
    c = build_cost_matrix(np.full((4, 3), 1 / 3), np.repeat(b, 4, 0), [0, 1], rand_boxes(np.random.default_rng(1), 2))
    assert np.all(c == c[0])


def test_cost_matches_scalar_formula():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(3), size=3)
    pred, gt = rand_boxes(rng, 3), rand_boxes(rng, 2)
    labels = [1, 0]
    c = build_cost_matrix(probs, pred, labels, gt)
    for i in range(3):
        for j in range(2):
            l1 = sum(abs(pred[i, k] - gt[j, k]) for k in range(6))
            g = giou_interval(to_corners(pred[i]), to_corners(gt[j]))
            expect = -2.0 * probs[i, labels[j]] + 5.0 * l1 - 2.0 * g
            assert abs(c[i, j] - expect) < 1e-12


def test_hungarian_small_cases():
    a = hungarian(np.array([[0.0, 9.0], [9.0, 0.0]]))
    assert a.pairs == [(0, 0), (1, 1)] and a.cost == 0.0
    b = hungarian(np.array([[5.0]]))
    assert b.pairs == [(0, 0)] and b.cost == 5.0


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        hungarian(np.array([[np.nan]]))
    assert len(hungarian(np.zeros((3, 0)))) == 0


def test_hungarian_exhaustive_200_seeds():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, n + 1))
        c = rng.normal(size=(n, m))
        a = hungarian(c)
        assert a.cost == assignment_cost_bruteforce(c)
        assert len(set(a.pred_idx.tolist())) == m == len(a)


def test_hungarian_lexicographic_tie_break():
    a = hungarian(np.zeros((4, 2)))
    assert a.pairs == [(0, 0), (1, 1)]


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_constant_shift_keeps_assignment(seed, shift):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    m = int(rng.integers(1, n + 1))
    c = rng.integers(0, 20, size=(n, m)).astype(float)
    a, b = hungarian(c), hungarian(c + shift)
    assert a.pairs == b.pairs
    assert abs(b.cost - (a.cost + m * shift)) < 1e-9


def perfect_logits(q, labels_per_query, k=1, big=30.0):
    z = np.zeros((q, k + 1))
    for i, lbl in enumerate(labels_per_query):
        z[i, lbl] = big
    return z


@pytest.mark.parametrize("variant", ["detr", "cond"])
def test_set_loss_perfect_prediction_box_terms_zero(variant):
    from vspe.losses import batch_set_loss

    gt = rand_boxes(np.random.default_rng(3), 2)
    boxes = np.concatenate([gt, rand_boxes(np.random.default_rng(4), 2)])
    logits = perfect_logits(4, [0, 0, 1, 1])
    a = match_predictions(logits, boxes, [0, 0], gt)
    out = batch_set_loss(Tensor(logits[None]), Tensor(boxes[None]), [([0, 0], gt)], [a], variant)
    assert abs(float(out["l1"].data)) < 1e-12
    assert abs(float(out["giou"].data)) < 1e-12
    assert float(out["cls"].data) < 1e-9


@pytest.mark.parametrize("variant", ["detr", "cond", "dino"])
def test_set_loss_permutation_invariant(variant):
    rng = np.random.default_rng(5)
    logits, boxes = rng.normal(size=(6, 3)), rand_boxes(rng, 6)
    labels, gt = np.array([1, 0, 1]), rand_boxes(rng, 3)
    a = match_predictions(logits, boxes, labels, gt)
    base = float(set_loss(Tensor(logits), Tensor(boxes), labels, gt, a, variant).data)
    for s in range(20):
        perm = np.random.default_rng(s).permutation(6)
        ap = match_predictions(logits[perm], boxes[perm], labels, gt)
        v = float(set_loss(Tensor(logits[perm]), Tensor(boxes[perm]), labels, gt, ap, variant).data)
        assert abs(v - base) < 1e-10


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_set_loss_hand_instance_detr():
    logits = np.array([[1.0, -0.5], [0.2, 0.7]])
    boxes = np.array([[0.5, 0.5, 0.5, 0.2, 0.3, 0.2], [0.2, 0.2, 0.3, 0.1, 0.1, 0.1]])
    gt = np.array([[0.52, 0.48, 0.5, 0.25, 0.3, 0.2]])
    a = match_predictions(logits, boxes, [0], gt)
    assert a.pairs == [(0, 0)]
    got = float(set_loss(Tensor(logits), Tensor(boxes), [0], gt, a, "detr").data)
    ce = (-math.log(_softmax(logits[0])[0]) * 1.0 - math.log(_softmax(logits[1])[1]) * 0.1) / 1.1
    l1 = sum(abs(boxes[0] - gt[0]))
    g = giou_interval(to_corners(boxes[0]), to_corners(gt[0]))
    assert abs(got - (ce + 5 * l1 + 2 * (1 - g))) < 1e-12


def focal_scalar(p, alpha, gamma):
    return -alpha * (1 - p) ** gamma * math.log(p)


def test_set_loss_hand_instance_focal():
    logits = np.array([[1.0, -0.5], [0.2, 0.7]])
    boxes = np.array([[0.5, 0.5, 0.5, 0.2, 0.3, 0.2], [0.2, 0.2, 0.3, 0.1, 0.1, 0.1]])
    gt = np.array([[0.52, 0.48, 0.5, 0.25, 0.3, 0.2]])
    a = match_predictions(logits, boxes, [0], gt)
    got = float(set_loss(Tensor(logits), Tensor(boxes), [0], gt, a, "cond").data)
    fl = focal_scalar(_softmax(logits[0])[0], 0.25, 2) + focal_scalar(_softmax(logits[1])[1], 0.75, 2)
    l1 = sum(abs(boxes[0] - gt[0]))
    g = giou_interval(to_corners(boxes[0]), to_corners(gt[0]))
    assert abs(got - (2 * fl + 5 * l1 + 2 * (1 - g))) < 1e-12


def test_set_loss_gradient():
    rng = np.random.default_rng(6)
    logits, boxes = rng.normal(size=(4, 3)), rand_boxes(rng, 4)
    labels, gt = np.array([1, 0]), rand_boxes(rng, 2)
    for variant in ("detr", "cond"):
        a = match_predictions(logits, boxes, labels, gt)
        assert gradcheck(lambda z, b: set_loss(z, b, labels, gt, a, variant), [logits, boxes]) < 1e-4


def test_focal_gamma_zero_is_weighted_ce():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(6, 3))
    t = np.array([0, 2, 1, 2, 2, 0])
    fl = float(focal_loss(Tensor(z), t, alpha=0.3, gamma=0.0).data)
    w = np.where(t == 2, 0.7, 0.3)
    ce = float(cross_entropy(Tensor(z), t, reduction="none").data @ w)
    assert abs(fl - ce) < 1e-12


def test_focal_limits_and_hand_value():
    assert float(focal_loss(Tensor(np.array([[40.0, 0.0]])), np.array([0])).data) < 1e-30
    z = np.log(np.array([[0.6, 0.4]]))
    got = float(focal_loss(Tensor(z), np.array([0]), alpha=0.25, gamma=2.0).data)
    assert abs(got - (-0.25 * 0.4**2 * math.log(0.6))) < 1e-15


def test_focal_rejects_bad_parameters():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.zeros((1, 2))), np.array([0]), gamma=-1)


def test_dino_cada_denoising_count():
    assert DATASET_PRESETS["CADA-like"]["num_dn"] == 8
    assert preset_model("CADA-like", "dino").num_dn == 8


def test_zero_noise_groups_equal_gt():
    rng = np.random.default_rng(8)
    gt = rand_boxes(rng, 3)
    groups = make_denoising_groups([0, 1, 0], gt, 9, 0.0, 0.0, 2, rng)
    assert len(groups) == 3
    for g in groups:
        assert np.array_equal(g.boxes, gt) and np.array_equal(g.labels, [0, 1, 0])


def test_perfect_reconstruction_zero_loss():
    rng = np.random.default_rng(9)
    gt = rand_boxes(rng, 2)
    dn = build_denoising_batch([(np.array([0, 0]), gt)], 4, 5, 1, 0.0, 0.0, rng)
    logits = np.tile(perfect_logits(1, [0]), (1, dn.num_dn, 1))
    out = denoising_loss(Tensor(logits), Tensor(dn.boxes), dn, "dino")
    assert float(out["l1"].data) < 1e-12 and float(out["giou"].data) < 1e-12
    assert float(out["cls"].data) < 1e-12


def test_attention_mask_exhaustive():
    mask = denoising_attention_mask([2, 2], 5)
    n_dn = 4
    group = [0, 0, 1, 1]
    for r in range(9):
        for c in range(9):
            if r >= n_dn and c < n_dn:
                assert mask[r, c]  # matching row never sees dn
            elif r < n_dn and c < n_dn:
                assert mask[r, c] == (group[r] != group[c])
            else:
                assert not mask[r, c]


def test_denoising_loss_decreases_along_path():
    rng = np.random.default_rng(10)
    gt = rand_boxes(rng, 2)
    dn = build_denoising_batch([(np.array([0, 0]), gt)], 4, 5, 1, 0.0, 0.0, rng)
    start = rand_boxes(np.random.default_rng(11), dn.num_dn)[None]
    logits = np.tile(perfect_logits(1, [0]), (1, dn.num_dn, 1))
    vals = []
    for t in np.linspace(0, 1, 5):
        b = (1 - t) * start + t * dn.target_boxes
        vals.append(float(denoising_loss(Tensor(logits), Tensor(b), dn, "dino")["total"].data))
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_zero_groups_contribute_nothing():
    rng = np.random.default_rng(12)
    assert build_denoising_batch([(np.zeros(0, int), np.zeros((0, 6)))], 8, 5, 1, 0.4, 0.2, rng) is None
    assert make_denoising_groups([], np.zeros((0, 6)), 8, 0.4, 0.2, 1, rng) == []
    assert float(denoising_loss(None, None, None, "dino")["total"].data) == 0.0


def test_denoising_batch_masks_padding():
    rng = np.random.default_rng(13)
    targets = [(np.array([0, 0]), rand_boxes(rng, 2)), (np.array([0]), rand_boxes(rng, 1))]
    dn = build_denoising_batch(targets, 8, 3, 1, 0.4, 0.2, rng)
    assert dn.num_dn == 8 and dn.num_groups == 4
    pad_cols = np.nonzero(~dn.valid[1])[0]
    assert len(pad_cols) == 4 and np.all(dn.attn_mask[1][:, pad_cols])
