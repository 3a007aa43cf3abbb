"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the terminal summary.

The end-to-end benchmark trains all three tiny detectors through the CLI, plus
a DETR on one-object volumes for the duplicate checks, and takes well over an
hour on one core. Trained runs are shared by the later checks through a
session fixture, and nothing is cached across sessions.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from vspe import cli
from vspe.benchmark import CPU_BUDGET_S, benchmark_config, toy_config
from vspe.config import build_run_config
from vspe.evaluation import EvalCase, map_all
from vspe.geometry import GlobalBox, iou3d, iou_corners
from vspe.models.config import DATASET_PRESETS, VARIANTS
from vspe.models.detectors import build_model
from vspe import checkpoint
from vspe.patches import merge_predictions, sliding_infer, tile_volume
from vspe.synth import Ellipsoid, SynthConfig, generate_dataset, render_volume
from vspe.tensor import no_grad
from vspe.verify import ap_oracle_check, geometry_oracle_check, hungarian_oracle_check, run_gradcheck

GOLDEN = Path(__file__).parent / "golden" / "presets.json"


# -- property and oracle criteria ----------------------------------------------------------------


def test_c1_gradient_suite(verdict):
    results, seconds = run_gradcheck(100)
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results) and min(r.seeds for r in results) >= 100 and seconds < 120
    verdict("C1", "gradient suite", ok,
            f"{len(results)} checks, max rel err {worst:.2e} (< 1e-4), {seconds:.1f}s (< 120s)")
    assert ok


def test_c2_hungarian_oracle(verdict):
    r = hungarian_oracle_check(200, 7)
    ok = r.passed and r.max_error == 0.0
    verdict("C2", "hungarian oracle", ok, f"{r.seeds} seeds, max |cost - exhaustive| = {r.max_error:g}")
    assert ok


def test_c3_geometry_oracle(verdict):
    r = geometry_oracle_check(1000)
    unit = abs(iou3d([0.5, 0.5, 0.5, 1, 1, 1], [1.0, 0.5, 0.5, 1, 1, 1]) - 1.0 / 3.0)
    ok = r.max_error <= 1e-12 and unit <= 1e-12
    verdict("C3", "geometry oracle", ok, f"1000 pairs max err {r.max_error:.1e}, unit-cube case err {unit:.1e}")
    assert ok


def test_c4_ap_oracle(verdict):
    r = ap_oracle_check(100)
    gt = [GlobalBox([0, 0, 0, 4, 4, 4], 0)]
    tp, fp = [0, 0, 0, 4, 4, 4], [20, 20, 20, 24, 24, 24]
    first = map_all([EvalCase("v", gt, [GlobalBox(tp, 0, 0.9), GlobalBox(fp, 0, 0.8)])]).map
    swapped = map_all([EvalCase("v", gt, [GlobalBox(fp, 0, 0.9), GlobalBox(tp, 0, 0.8)])]).map
    ok = r.max_error <= 1e-12 and first == 1.0 and swapped == 0.5
    verdict("C4", "AP oracle", ok,
            f"100 seeds max err {r.max_error:.1e}; hand case AP {first:g} / swapped {swapped:g}")
    assert ok


def test_c5_preset_fidelity(verdict):
    golden = json.loads(GOLDEN.read_text())
    mismatches = []
    for name, want in golden.items():
        for variant in VARIANTS:
            run = build_run_config({"preset": name, "model": {"variant": variant}})
            got = (run.model.num_queries, run.model.num_dn, run.train.epochs)
            exp = (want["queries"][variant], want["num_dn"] if variant == "dino" else 0, want["epochs"][variant])
            if got != exp:
                mismatches.append(f"{name}/{variant}: {got} != {exp}")
    ok = not mismatches and DATASET_PRESETS == golden
    verdict("C5", "preset fidelity", ok, "; ".join(mismatches) or "4 presets x 3 variants match the golden file")
    assert ok


def _merge_instance(rng):
    n = int(rng.integers(1, 21))
    boxes = []
    for _ in range(n):
        lo = np.round(rng.uniform(0, 30, 3) * 2) / 2
        size = np.round(rng.uniform(1, 10, 3) * 2) / 2
        boxes.append(GlobalBox(np.concatenate([lo, lo + size]), int(rng.integers(2)), float(rng.uniform(0.05, 1))))
    return boxes


def _same(a, b, shift=0.0):
    return len(a) == len(b) and all(
        x.label == y.label and x.score == y.score and np.max(np.abs(x.corners + shift - y.corners)) < 1e-9
        for x, y in zip(a, b))


def test_c7_merge_properties(verdict):
    failures = {"idempotence": 0, "count": 0, "translation": 0}
    for seed in range(200):
        rng = np.random.default_rng(seed)
        boxes = _merge_instance(rng)
        once = merge_predictions(boxes)
        if not _same(merge_predictions(once), once):
            failures["idempotence"] += 1
        if len(once) > len(boxes) or {b.label for b in once} != {b.label for b in boxes}:
            failures["count"] += 1
        t = np.tile(rng.integers(-20, 21, 3), 2).astype(float)
        moved = merge_predictions([GlobalBox(b.corners + t, b.label, b.score) for b in boxes])
        if not _same(once, moved, t):
            failures["translation"] += 1
    ok = not any(failures.values())
    verdict("C7a", "merge properties", ok, f"200 instances, failures {failures}")
    assert ok


# -- synthetic end-to-end benchmark ----------------------------------------------------------------


class Bench:
    """Lazily trains each run through the CLI, once per session.

    A run name is a variant ("detr", "cond", "dino") or "toy" for the
    one-object DETR.
    """

    def __init__(self, root: Path):
        self.root = root
        self.runs: dict[str, dict] = {}

    def conf(self, name: str, tag: str) -> list[str]:
        out = self.root / f"{name}-{tag}"
        out.mkdir(parents=True, exist_ok=True)
        if name == "toy":
            run = toy_config(out_dir=str(out), data_dir=str(self.root / "data-toy"))
        else:
            run = benchmark_config(name, out_dir=str(out), data_dir=str(self.root / "data"))
        path = out / "run.yaml"
        path.write_text(yaml.safe_dump(run.to_dict(), sort_keys=False))
        return ["--config", str(path)]

    def run(self, name: str, tag: str = "a") -> dict:
        key = f"{name}-{tag}"
        if key in self.runs:
            return self.runs[key]
        conf = self.conf(name, tag)
        out = self.root / key
        run = build_run_config(yaml.safe_load((out / "run.yaml").read_text()))
        if not (Path(run.data.data_dir) / "manifest.json").exists():
            assert cli.main(["gen-data", *conf]) == 0
        t0 = time.process_time()
        assert cli.main(["train", *conf]) == 0
        cpu = time.process_time() - t0
        assert cli.main(["infer", *conf]) == 0
        results = out / "results.json"
        assert cli.main(["evaluate", *conf, "--out", str(results)]) == 0
        rec = json.loads(results.read_text())
        self.runs[key] = {"map": float(rec["map_mean"]), "cpu": cpu, "dir": out, "run": run}
        return self.runs[key]

    def model(self, name: str):
        r = self.run(name)
        m = build_model(r["run"].model)
        checkpoint.load_model(r["dir"] / "checkpoint.vspe", m)
        return m, r["run"]


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    return Bench(tmp_path_factory.mktemp("bench"))


THRESHOLDS = {"detr": 0.3, "cond": 0.3, "dino": 0.5}


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["detr", "cond", "dino"])
def test_c6_end_to_end(bench, verdict, variant):
    r = bench.run(variant)
    ok = r["map"] >= THRESHOLDS[variant] and r["cpu"] <= CPU_BUDGET_S
    verdict("C6", f"synthetic benchmark {variant}", ok,
            f"held-out mAP@0.1 {r['map']:.3f} (>= {THRESHOLDS[variant]}), train CPU {r['cpu'] / 60:.1f} min (<= 30)")
    assert ok


@pytest.mark.slow
def test_c6_variant_ordering_informational(bench, verdict):
    maps = {v: bench.run(v)["map"] for v in VARIANTS}
    ordered = maps["dino"] >= maps["cond"] >= maps["detr"]
    verdict("C6", "ordering DINO >= COND >= DETR (informational)", True,
            f"{'holds' if ordered else 'does not hold'}: " + ", ".join(f"{v} {m:.3f}" for v, m in maps.items()))


def _two_patch_volume(rng, noise: float):
    """48x32x32 volume whose one blob sits in the overlap of the two 32^3 patches along axis 0."""
    cfg = SynthConfig(volume_shape=(48, 32, 32), noise=noise)
    center = np.array([rng.uniform(22.0, 26.0), rng.uniform(12.0, 20.0), rng.uniform(12.0, 20.0)])
    obj = Ellipsoid(center, rng.uniform(3.5, 5.0, 3), np.eye(3))
    data, boxes = render_volume(cfg, [obj], rng)
    return data, boxes[0].corners


@pytest.mark.slow
def test_c7_two_patch_duplicate_collapses(bench, verdict):
    model, run = bench.model("toy")
    grid = tile_volume((48, 32, 32), run.model.patch_size, 0.5)
    assert len(grid) == 2
    mc = run.merge
    trials, collapsed, pre_ok, floor_counts = 20, 0, 0, []
    for seed in range(trials):
        data, gt = _two_patch_volume(np.random.default_rng(seed), run.synth.noise)
        raw = sliding_infer(model, data, grid, mc.score_floor)
        hits = [b for b in raw if float(iou_corners(b.corners, gt)) >= 0.1]
        merged = [b for b in merge_predictions(raw, mc) if float(iou_corners(b.corners, gt)) >= 0.1]
        # a confident copy is one scoring above 0.5, as in the duplicate-suppression smoke
        pre_ok += 1 <= sum(b.score > 0.5 for b in hits) <= 2
        floor_counts.append(len(hits))
        collapsed += len(merged) == 1
    ok = collapsed == trials and pre_ok == trials
    verdict("C7b", "two-patch duplicate collapses to one box", ok,
            f"{collapsed}/{trials} merged to one, {pre_ok}/{trials} with 1-2 confident raw copies "
            f"(copies above the {mc.score_floor} floor: {min(floor_counts)}-{max(floor_counts)})")
    assert ok


@pytest.mark.slow
def test_c8_determinism(bench, verdict):
    a = bench.run("detr", "a")
    b = bench.run("detr", "b")
    same = {name: (a["dir"] / name).read_bytes() == (b["dir"] / name).read_bytes()
            for name in ("train.log", "losses.json", "predictions.json")}
    ok = all(same.values())
    verdict("C8", "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok


@pytest.mark.slow
def test_duplicate_suppression_smoke(bench, verdict):
    model, run = bench.model("toy")
    cfg = SynthConfig(**{**run.synth.to_dict(), "seed": 1000})
    cases = generate_dataset(cfg, 40)
    single = 0
    for vol, ann in cases:
        box = ann.boxes[0].corners
        center = np.round(0.5 * (box[:3] + box[3:])).astype(int)
        off = np.clip(center - 16, 0, np.array(vol.shape) - 32)
        patch = vol.data[off[0]:off[0] + 32, off[1]:off[1] + 32, off[2]:off[2] + 32][None, None]
        with no_grad():
            probs = model.forward(patch, train=False).final.probs()[0, :, :-1].max(-1)
        single += int((probs > 0.5).sum() <= 1)
    rate = single / len(cases)
    ok = rate >= 0.9
    verdict("smoke", "duplicate suppression (DETR, one-object training)", ok,
            f"at most one query above 0.5 on {single}/{len(cases)} fresh one-object patches ({rate:.0%} >= 90%)")
    assert ok
