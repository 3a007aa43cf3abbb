from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

VARIANTS = ("detr", "cond", "dino")


@dataclass
class ModelConfig:
    """Architecture of one detector.

    ``backbone_channels`` has one entry per stride-2 stage, so its length is
    the number of halvings. Single-scale variants read the last (coarsest)
    stage; DINO reads the last ``num_levels`` stages.
    """

    variant: str = "detr"
    hidden_dim: int = 128
    ffn_dim: int = 1024
    heads: int = 8
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 6
    num_dn: int = 0
    num_levels: int = 1
    num_classes: int = 1
    patch_size: tuple = (32, 32, 32)
    backbone_channels: tuple = (8, 16, 32)
    stem_channels: int = 4
    num_points: int = 4
    box_noise_scale: float = 0.4
    label_flip_prob: float = 0.2
    dtype: str = "float64"
    init_seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("hidden_dim", "ffn_dim", "heads", "enc_layers", "dec_layers",
                     "num_queries", "num_levels", "num_classes", "num_points", "stem_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if len(self.patch_size) != 3:
            raise ValueError("patch_size needs three extents")
        if not self.backbone_channels:
            raise ValueError("backbone needs at least one stage")
        if self.variant != "dino":
            if self.num_dn:
                raise ValueError("only the dino variant uses denoising queries")
            if self.num_levels != 1:
                raise ValueError("single-scale variants use exactly one feature level")
        if self.num_levels > len(self.backbone_channels):
            raise ValueError("num_levels exceeds the number of backbone stages")
        if self.num_dn < 0:
            raise ValueError("num_dn must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def halvings(self) -> int:
        return len(self.backbone_channels)

    def level_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial extents of every backbone stage output, finest first."""
        shapes = []
        cur = self.patch_size
        for _ in self.backbone_channels:
            cur = tuple((n - 1) // 2 + 1 for n in cur)
            shapes.append(cur)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


# Data set presets: (queries DETR, COND, DINO), DINO denoising queries, epochs per variant.
DATASET_PRESETS = {
    "CADA-like": {"queries": {"detr": 6, "cond": 12, "dino": 20}, "num_dn": 8,
                  "epochs": {"detr": 50, "cond": 50, "dino": 25}},
    "RibFrac-like": {"queries": {"detr": 20, "cond": 50, "dino": 90}, "num_dn": 20,
                     "epochs": {"detr": 125, "cond": 100, "dino": 75}},
    "KiTS19-like": {"queries": {"detr": 6, "cond": 12, "dino": 20}, "num_dn": 8,
                    "epochs": {"detr": 100, "cond": 100, "dino": 35}},
    "LIDC-like": {"queries": {"detr": 12, "cond": 24, "dino": 40}, "num_dn": 8,
                  "epochs": {"detr": 200, "cond": 100, "dino": 75}},
}


def preset_model(dataset: str, variant: str, **overrides) -> ModelConfig:
    """Model config carrying a data set preset's query counts."""
    if dataset not in DATASET_PRESETS:
        raise KeyError(f"unknown data set preset {dataset!r}")
    p = DATASET_PRESETS[dataset]
    kw = dict(variant=variant, num_queries=p["queries"][variant],
              num_dn=p["num_dn"] if variant == "dino" else 0,
              num_levels=3 if variant == "dino" else 1)
    if variant == "dino":
        kw["backbone_channels"] = (8, 16, 32, 32)
        kw["hidden_dim"] = 120
        kw["heads"] = 8
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_config(variant: str, **overrides) -> ModelConfig:
    """Desk-scale architecture used by the synthetic benchmark."""
    p = DATASET_PRESETS["CADA-like"]
    kw = dict(variant=variant, hidden_dim=24, ffn_dim=128, heads=4, enc_layers=3, dec_layers=3,
              num_queries=p["queries"][variant], num_classes=1, patch_size=(32, 32, 32),
              backbone_channels=(16, 24, 32), stem_channels=8, dtype="float32")
    if variant == "dino":
        kw.update(num_dn=p["num_dn"], num_levels=3, backbone_channels=(16, 24, 32, 32))
    kw.update(overrides)
    return ModelConfig(**kw)


__all__ = ["ModelConfig", "DATASET_PRESETS", "preset_model", "tiny_config", "VARIANTS"]
