import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vspe.evaluation import (
    EvalCase,
    ap_at_iou,
    kfold_split,
    map_all,
    match_detections,
    read_results,
    results_record,
    write_results,
)
from vspe.geometry import GlobalBox
from vspe.oracles import map_bruteforce
from vspe.verify import random_eval_instance

GT = [0, 0, 0, 4, 4, 4]
FAR = [20, 20, 20, 24, 24, 24]


def case(vid, gt, pred):
    return EvalCase(vid, [GlobalBox(c, l) for c, l in gt], [GlobalBox(c, l, s) for c, l, s in pred])


def test_perfect_predictions():
    cases = [case("a", [(GT, 0), (FAR, 0)], [(GT, 0, 0.9), (FAR, 0, 0.8)]), case("b", [(GT, 0)], [(GT, 0, 0.5)])]
    assert ap_at_iou(cases, 0) == 1.0


def test_no_predictions():
    assert ap_at_iou([case("a", [(GT, 0)], [])], 0) == 0.0
    assert ap_at_iou([case("a", [(GT, 0)], [])], 1) is None


def test_hand_pr_envelope():
    tp_first = [case("a", [(GT, 0)], [(GT, 0, 0.9), (FAR, 0, 0.8)])]
    assert ap_at_iou(tp_first, 0) == 1.0
    curve = map_all(tp_first).curves[0]
    assert list(zip(curve.recall, curve.precision)) == [(1.0, 1.0), (1.0, 0.5)]
    fp_first = [case("a", [(GT, 0)], [(FAR, 0, 0.9), (GT, 0, 0.8)])]
    assert ap_at_iou(fp_first, 0) == 0.5


def test_map_single_and_two_classes():
    one = [case("a", [(GT, 0)], [(GT, 0, 0.9), (FAR, 0, 0.95)])]
    r = map_all(one)
    assert r.map == r.per_class[0] == 0.5
    two = [case("a", [(GT, 0), (FAR, 1)], [(GT, 0, 0.9)])]
    r2 = map_all(two)
    assert r2.per_class == {0: 1.0, 1: 0.0} and r2.map == 0.5


def test_absent_class_excluded():
    r = map_all([case("a", [(GT, 0)], [(GT, 0, 0.9), (FAR, 2, 0.99)])])
    assert r.per_class == {0: 1.0}


def test_errors():
    with pytest.raises(ValueError):
        map_all([case("a", [], [(GT, 0, 0.5)])])
    with pytest.raises(ValueError):
        map_all([case("a", [(GT, 0)], []), case("a", [(GT, 0)], [])])


def test_cross_volume_matching_forbidden():
    cases = [case("a", [(GT, 0)], []), case("b", [], [(GT, 0, 0.9)])]
    assert ap_at_iou(cases, 0) == 0.0


def test_random_instances_match_bruteforce():
    for seed in range(100):
        cases = random_eval_instance(np.random.default_rng(seed))
        r = map_all(cases)
        pairs = [([(g.corners, g.label) for g in c.gt], [(p.corners, p.label, p.score) for p in c.pred])
                 for c in cases]
        aps, m = map_bruteforce(pairs)
        assert set(aps) == set(r.per_class)
        assert all(abs(aps[k] - r.per_class[k]) < 1e-12 for k in aps)
        assert abs(m - r.map) < 1e-12


seeds = st.integers(0, 100_000)


def _instance(seed):
    return random_eval_instance(np.random.default_rng(seed))


@given(seeds)
def test_score_order_invariance(seed):
    cases = _instance(seed)
    warped = [EvalCase(c.volume_id, c.gt, [GlobalBox(p.corners, p.label, np.tanh(3 * p.score) ** 3 + 2.0)
                                           for p in c.pred]) for c in cases]
    assert map_all(cases).per_class == map_all(warped).per_class


@given(seeds)
def test_top_tp_never_hurts(seed):
    cases = _instance(seed)
    base = map_all(cases)
    c0 = cases[0]
    for k in base.per_class:
        # a new, isolated object found by a perfect top-score prediction
        far = GlobalBox([500, 500, 500, 503, 503, 503], k)
        top = GlobalBox(far.corners, k, 10.0)
        new = [EvalCase(c0.volume_id, list(c0.gt) + [far], [top] + list(c0.pred))] + cases[1:]
        assert ap_at_iou(new, k) >= base.per_class[k] - 1e-12


@given(seeds)
def test_bottom_fp_never_helps(seed):
    cases = _instance(seed)
    base = map_all(cases)
    c0 = cases[0]
    for k in base.per_class:
        fp = GlobalBox([1000, 1000, 1000, 1001, 1001, 1001], k, -1.0)
        new = [EvalCase(c0.volume_id, c0.gt, list(c0.pred) + [fp])] + cases[1:]
        assert ap_at_iou(new, k) <= base.per_class[k] + 1e-12


@given(seeds)
def test_each_gt_and_prediction_matched_once(seed):
    cases = _instance(seed)
    for k in map_all(cases).per_class:
        scores, tp, num_gt = match_detections(cases, k)
        assert tp.sum() <= num_gt
        assert np.all(np.diff(scores) <= 0)


@given(seeds)
def test_ap_in_unit_interval(seed):
    r = map_all(_instance(seed))
    assert all(0.0 <= v <= 1.0 for v in r.per_class.values())
    assert abs(r.map - np.mean(list(r.per_class.values()))) < 1e-15


def test_kfold_basic():
    ids = [f"c{i}" for i in range(10)]
    folds = kfold_split(ids, 5, seed=3)
    vals = [set(v) for _, v in folds]
    assert all(len(v) == 2 for v in vals)
    assert set().union(*vals) == set(ids)
    assert sum(len(v) for v in vals) == 10
    for tr, va in folds:
        assert set(tr) | set(va) == set(ids) and not set(tr) & set(va)
    assert kfold_split(ids, 5, seed=3) == folds
    assert kfold_split(ids, 5, seed=4) != folds


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(["a", "b"], 3)
    with pytest.raises(ValueError):
        kfold_split(["a", "b"], 1)


def test_results_file(tmp_path):
    r = map_all([case("a", [(GT, 0)], [(GT, 0, 0.9)])])
    rec = results_record([(0, r, 1), (1, r, 1)])
    write_results(rec, tmp_path / "r.json")
    back = read_results(tmp_path / "r.json")
    assert back == rec
    assert back["folds"][0]["per_class"] == {"0": 1.0} and back["map_mean"] == 1.0
