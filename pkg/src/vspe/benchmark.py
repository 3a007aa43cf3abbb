"""Synthetic end-to-end benchmark recipe.

Sixty 48^3 volumes holding one to three ellipsoids of a single class, the tiny
architecture of each variant, a desk-sized training schedule and a held-out
fold of the five-fold split. The acceptance suite and ``demos/`` both build
their runs from here.

``toy_config`` is the same recipe for DETR on one-object volumes, used to
check duplicate suppression and the two-patch merge scenario.
"""

from __future__ import annotations

from .config import RunConfig, build_run_config
from .models.config import VARIANTS, tiny_config

NUM_CASES = 60
CPU_BUDGET_S = 30 * 60

# epochs x batches_per_epoch was sized so each variant trains inside the CPU budget
SCHEDULES = {
    "detr": {"epochs": 60, "batches_per_epoch": 100},
    "cond": {"epochs": 50, "batches_per_epoch": 100},
    "dino": {"epochs": 20, "batches_per_epoch": 100},
}
TOY_SCHEDULE = {"epochs": 40, "batches_per_epoch": 100}
BASE_LR = 1e-3
# mean fusion lets a cluster of weak duplicates outrank a confident detection
FUSION = "max"


def benchmark_config(variant: str, out_dir: str = "runs/bench", data_dir: str | None = None,
                     seed: int = 0, **train) -> RunConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return _config(variant, SCHEDULES[variant], (1, 3), out_dir, data_dir, seed, train)


def toy_config(out_dir: str = "runs/toy", data_dir: str | None = None, seed: int = 0, **train) -> RunConfig:
    """DETR trained on volumes holding exactly one object."""
    return _config("detr", TOY_SCHEDULE, (1, 1), out_dir, data_dir, seed, train)


def _config(variant, schedule, objects, out_dir, data_dir, seed, train) -> RunConfig:
    t = {"base_lr": BASE_LR, "seed": seed, **schedule, **train}
    return build_run_config({
        "model": tiny_config(variant, init_seed=seed).to_dict(),
        "train": t,
        "synth": {"volume_shape": [48, 48, 48], "objects": list(objects), "radius": [[0.06, 0.12]],
                  "num_classes": 1, "seed": seed},
        "merge": {"fusion": FUSION},
        "data": {"num_cases": NUM_CASES, "folds": 5, "fold": 0, "data_dir": data_dir},
        "out_dir": out_dir,
    })
