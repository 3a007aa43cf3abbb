"""Run configuration: YAML files, dotted-path overrides and data set presets."""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .matching import MatchWeights
from .models.config import DATASET_PRESETS, VARIANTS, ModelConfig
from .patches import MergeConfig
from .synth import SynthConfig


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    poly_exponent: float = 0.9
    epochs: int = 50
    batches_per_epoch: int = 50  # 2500 at full scale
    batch_size: int = 4
    seed: int = 0
    grad_clip: float = 0.1  # max global gradient norm; 0 disables
    fg_bias: float = 0.67
    augment: bool = True
    max_rot_deg: float = 20.0
    min_scale: float = 0.8
    aux_loss: bool = True
    val_every: int = 0  # epochs between validation mAP evaluations; 0 disables

    def validate(self) -> None:
        for name in ("base_lr", "epochs", "batches_per_epoch", "batch_size", "poly_exponent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("train.weight_decay and train.grad_clip must be non-negative")
        if not 0.0 <= self.fg_bias <= 1.0:
            raise ValueError("train.fg_bias must lie in [0, 1]")
        if not 0.0 < self.min_scale <= 1.0 or self.max_rot_deg < 0:
            raise ValueError("augmentation limits out of range")


@dataclass
class DataConfig:
    num_cases: int = 60
    folds: int = 5
    fold: int = 0
    split_seed: int = 0
    data_dir: str | None = None  # generated in memory when unset

    def validate(self) -> None:
        if self.num_cases <= 0 or self.folds < 2:
            raise ValueError("data.num_cases must be positive and data.folds at least 2")
        if not 0 <= self.fold < self.folds:
            raise ValueError("data.fold must index one of the folds")


@dataclass
class EvalConfig:
    iou_threshold: float = 0.1
    overlap: float = 0.5
    batch_size: int = 8

    def validate(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("eval.iou_threshold must lie in (0, 1]")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("eval.overlap must lie in [0, 1)")


SECTIONS = ("model", "train", "synth", "merge", "loss", "data", "eval")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    preset: str | None = None
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        self.data.validate()
        self.eval.validate()
        if self.preset is not None and self.preset not in DATASET_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(DATASET_PRESETS)}")
        if self.model.num_classes != self.synth.num_classes:
            raise ValueError("model.num_classes must equal synth.num_classes")

    def to_dict(self) -> dict:
        loss = asdict(self.loss)
        return {
            "preset": self.preset,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "synth": self.synth.to_dict(),
            "merge": asdict(self.merge),
            "loss": loss,
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return build_run_config(d or {})


def preset_defaults(preset: str, variant: str) -> dict:
    """Config fragment a data set preset contributes: query counts, denoising and epochs."""
    if preset not in DATASET_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(DATASET_PRESETS)}")
    p = DATASET_PRESETS[preset]
    return {
        "model": {"num_queries": p["queries"][variant], "num_dn": p["num_dn"] if variant == "dino" else 0},
        "train": {"epochs": p["epochs"][variant]},
    }


def _merge_into(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_into(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    try:
        return cls.from_dict(data) if hasattr(cls, "from_dict") else cls(**data)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def build_run_config(d: dict) -> RunConfig:
    """Assemble a RunConfig. A preset fills query/epoch defaults; explicit keys win."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(d) - set(SECTIONS) - {"preset", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for s in SECTIONS:
        if s in d and not isinstance(d[s], dict):
            raise ConfigError(f"section {s!r} must be a mapping")
    preset = d.get("preset")
    if preset is not None:
        variant = d.get("model", {}).get("variant", ModelConfig.variant)
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}")
        d = _merge_into(preset_defaults(preset, variant), d)
        if variant == "dino":
            d = _merge_into({"model": {"num_levels": 3}}, d)
    loss_d = dict(d.get("loss", {}))
    if "match" in loss_d:
        loss_d["match"] = _section(MatchWeights, dict(loss_d["match"]), "loss.match")
    try:
        run = RunConfig(
            model=_section(ModelConfig, d.get("model", {}), "model"),
            train=_section(TrainConfig, d.get("train", {}), "train"),
            synth=_section(SynthConfig, d.get("synth", {}), "synth"),
            merge=_section(MergeConfig, d.get("merge", {}), "merge"),
            loss=_section(LossConfig, loss_d, "loss"),
            data=_section(DataConfig, d.get("data", {}), "data"),
            eval=_section(EvalConfig, d.get("eval", {}), "eval"),
            preset=preset,
            out_dir=str(d.get("out_dir", RunConfig.out_dir)),
        )
        run.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return run


def parse_value(text: str):
    """Interpret an override value with YAML scalar rules (``1e-3``, ``true``, ``[1, 2]``)."""
    try:
        return _load_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc


def apply_overrides(d: dict, overrides: dict[str, object]) -> dict:
    """Set dotted-path keys, e.g. ``{"train.base_lr": 1e-3}``."""
    out = copy.deepcopy(d)
    for path, value in overrides.items():
        keys = path.split(".")
        if not all(keys):
            raise ConfigError(f"malformed override key {path!r}")
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {path!r} descends into a non-mapping value")
            node = nxt
        node[keys[-1]] = value
    return out


def load_config_dict(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        d = _load_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from exc
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"config {p} must hold a mapping at the top level")
    return d


def load_config(path, overrides: dict[str, object] | None = None) -> RunConfig:
    d = load_config_dict(path)
    return build_run_config(apply_overrides(d, overrides or {}))


def dump_config(run: RunConfig) -> str:
    return yaml.safe_dump(run.to_dict(), sort_keys=False)


def save_config(run: RunConfig, path) -> None:
    Path(path).write_text(dump_config(run))
