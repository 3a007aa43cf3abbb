import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vspe.errors import DataError
from vspe.geometry import GlobalBox
from vspe.models.detectors import DetectionSet, ModelOutput
from vspe.oracles import greedy_merge_reference
from vspe.patches import (
    MergeConfig,
    extract_patches,
    greedy_clusters,
    merge_predictions,
    read_predictions,
    sliding_infer,
    tile_volume,
    write_predictions,
)
from vspe.tensor import Tensor


def test_single_patch():
    g = tile_volume((64, 64, 64), (64, 64, 64))
    assert len(g) == 1 and g.offsets == ((0, 0, 0),)


def test_stride_32_offsets():
    g = tile_volume((96, 96, 96), (64, 64, 64), 0.5)
    assert g.stride == (32, 32, 32)
    assert {o[0] for o in g.offsets} == {0, 32} and len(g) == 8
    assert list(g.offsets) == sorted(g.offsets)


def test_small_volume_is_padded():
    g = tile_volume((20, 40, 32), (32, 32, 32))
    assert g.padding == (12, 0, 0)
    p = extract_patches(np.ones((20, 40, 32)), g)
    assert p.shape == (len(g), 1, 32, 32, 32)
    assert np.all(p[:, :, 20:] == 0)


def test_bad_tiling_arguments():
    with pytest.raises(ValueError):
        tile_volume((10, 10, 10), (4, 4, 4), overlap=1.0)
    with pytest.raises(ValueError):
        tile_volume((10, 10), (4, 4, 4))


def test_coverage_50_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(1, 30, 3))
        patch = tuple(int(v) for v in rng.integers(1, 16, 3))
        g = tile_volume(shape, patch, float(rng.uniform(0, 0.9)))
        hit = np.zeros(g.padded_shape, dtype=int)
        for o in g.offsets:
            hit[tuple(slice(a, a + p) for a, p in zip(o, patch))] += 1
        assert np.all(hit[: shape[0], : shape[1], : shape[2]] >= 1)


class BlobModel:
    """Stub detector: one query that fires on the bounding box of bright voxels."""

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def forward(self, batch, train=False):
        n = batch.shape[0]
        size = np.array(batch.shape[2:], dtype=float)
        logits = np.tile([[-10.0, 10.0]], (n, 1, 1))
        boxes = np.tile([[0.5, 0.5, 0.5, 0.1, 0.1, 0.1]], (n, 1, 1))
        for i in range(n):
            idx = np.nonzero(batch[i, 0] > self.threshold)
            if len(idx[0]):
                lo = np.array([a.min() for a in idx])
                hi = np.array([a.max() + 1 for a in idx])
                boxes[i, 0] = np.concatenate([(lo + hi) / 2 / size, (hi - lo) / size])
                logits[i, 0] = [10.0, -10.0]
        return ModelOutput([DetectionSet(Tensor(logits), Tensor(boxes))])


def test_sliding_infer_empty_volume():
    g = tile_volume((40, 40, 40), (16, 16, 16))
    assert sliding_infer(BlobModel(), np.zeros((40, 40, 40)), g) == []


def test_object_inside_one_patch_appears_once():
    vol = np.zeros((32, 32, 32))
    vol[3:7, 4:9, 2:6] = 1.0
    g = tile_volume(vol.shape, (16, 16, 16), overlap=0.0)
    raw = sliding_infer(BlobModel(), vol, g)
    assert len(raw) == 1
    assert np.array_equal(raw[0].corners, [3, 4, 2, 7, 9, 6])


def test_object_in_overlap_merges_to_one():
    vol = np.zeros((32, 16, 16))
    vol[10:14, 4:8, 4:8] = 1.0  # inside patches at offset 0 and 8 along axis 0
    g = tile_volume(vol.shape, (16, 16, 16), overlap=0.5)
    raw = sliding_infer(BlobModel(), vol, g)
    assert 1 <= len(raw) <= 2
    merged = merge_predictions(raw)
    assert len(merged) == 1
    assert np.allclose(merged[0].corners, [10, 4, 4, 14, 8, 8])


def test_border_weighting_marks_cut_boxes():
    vol = np.zeros((32, 16, 16))
    vol[12:20, 4:8, 4:8] = 1.0
    g = tile_volume(vol.shape, (16, 16, 16), overlap=0.5)
    raw = sliding_infer(BlobModel(), vol, g, border_weighting=True)
    cut = [b for b in raw if b.weight < 1.0]
    assert cut and all(b.corners[3] == 16 or b.corners[0] == 16 for b in cut)
    truth = np.array([12, 4, 4, 20, 8, 8])
    weighted = merge_predictions(raw)
    plain = merge_predictions(sliding_infer(BlobModel(), vol, g))
    assert len(weighted) == len(plain) == 1
    # cut copies at offsets 0 and 16 pull less once down-weighted
    assert np.allclose(weighted[0].corners, [13, 4, 4, 19, 8, 8])
    assert np.abs(weighted[0].corners - truth).sum() < np.abs(plain[0].corners - truth).sum()


def test_identical_pair_mean_fusion():
    c = [0, 0, 0, 4, 4, 4]
    out = merge_predictions([GlobalBox(c, 0, 0.9), GlobalBox(c, 0, 0.8)])
    assert len(out) == 1 and abs(out[0].score - 0.85) < 1e-15
    assert np.array_equal(out[0].corners, c)
    mx = merge_predictions([GlobalBox(c, 0, 0.9), GlobalBox(c, 0, 0.8)], MergeConfig(fusion="max"))
    assert mx[0].score == 0.9


def test_score_weighted_corners():
    out = merge_predictions([GlobalBox([0, 0, 0, 4, 4, 4], 0, 0.75), GlobalBox([1, 0, 0, 5, 4, 4], 0, 0.25)])
    assert np.allclose(out[0].corners, [0.25, 0, 0, 4.25, 4, 4])


def test_disjoint_unchanged_and_classes_kept_apart():
    boxes = [GlobalBox([0, 0, 0, 2, 2, 2], 0, 0.9), GlobalBox([5, 5, 5, 7, 7, 7], 0, 0.8),
             GlobalBox([0, 0, 0, 2, 2, 2], 1, 0.7)]
    assert len(merge_predictions(boxes)) == 3


def test_merge_config_validation():
    for kw in ({"iou_threshold": 0.0}, {"score_floor": 1.0}, {"fusion": "median"}):
        with pytest.raises(ValueError):
            MergeConfig(**kw)


def half_grid(lo, hi):
    return st.integers(lo * 2, hi * 2).map(lambda v: v / 2)


box_st = st.builds(
    lambda lo, size, label, score: GlobalBox(np.concatenate([lo, np.asarray(lo) + size]), label, score),
    st.tuples(half_grid(0, 30), half_grid(0, 30), half_grid(0, 30)),
    st.tuples(half_grid(1, 10), half_grid(1, 10), half_grid(1, 10)).map(np.array),
    st.integers(0, 1),
    st.floats(0.05, 1.0),
)
instances = st.lists(box_st, max_size=20)


def same(a, b, tol=0.0):
    return (len(a) == len(b) and all(x.label == y.label and abs(x.score - y.score) <= tol
                                     and np.max(np.abs(x.corners - y.corners)) <= tol for x, y in zip(a, b)))


@given(instances)
def test_merge_idempotent(boxes):
    once = merge_predictions(boxes)
    assert same(merge_predictions(once), once)


@given(instances)
def test_merge_never_adds_boxes_or_labels(boxes):
    out = merge_predictions(boxes)
    assert len(out) <= len(boxes)
    assert {b.label for b in out} <= {b.label for b in boxes}
    for lbl in {b.label for b in boxes}:
        assert any(b.label == lbl for b in out)


@given(instances, st.tuples(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20)))
def test_merge_translation_equivariant(boxes, shift):
    t = np.array(shift * 2, dtype=float)
    moved = [GlobalBox(b.corners + t, b.label, b.score) for b in boxes]
    a = merge_predictions(boxes)
    b = merge_predictions(moved)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.label == y.label and x.score == y.score
        assert np.max(np.abs(x.corners + t - y.corners)) < 1e-9


def test_greedy_pass_matches_reference():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(20):
            lo = rng.uniform(0, 20, 3)
            boxes.append(GlobalBox(np.concatenate([lo, lo + rng.uniform(2, 8, 3)]),
                                   int(rng.integers(2)), float(rng.uniform(0.05, 1))))
        got = sorted(sorted(c) for c in greedy_clusters(boxes, 0.1))
        ref = greedy_merge_reference([(b.corners, b.label, b.score) for b in boxes], 0.1)
        assert got == ref


def test_score_floor_drops_weak_boxes():
    out = merge_predictions([GlobalBox([0, 0, 0, 1, 1, 1], 0, 0.01)])
    assert out == []


def test_prediction_file_round_trip(tmp_path):
    preds = {"b": [GlobalBox([0.1, 0.2, 0.3, 1.5, 2.5, 3.5], 0, 0.3), GlobalBox([1, 1, 1, 2, 2, 2], 1, 0.9)],
             "a": []}
    path = tmp_path / "p.json"
    write_predictions(preds, path)
    back = read_predictions(path)
    assert list(back) == ["a", "b"]
    assert [b.score for b in back["b"]] == [0.9, 0.3]
    assert np.array_equal(back["b"][1].corners, preds["b"][0].corners)
    write_predictions(back, tmp_path / "q.json")
    assert (tmp_path / "q.json").read_bytes() == path.read_bytes()


def test_bad_prediction_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{\"volumes\": [{\"id\": 1}]}")
    with pytest.raises(DataError):
        read_predictions(p)
