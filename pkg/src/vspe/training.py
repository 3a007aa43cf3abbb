"""Optimizer, learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, save_config
from .errors import NumericError
from .evaluation import EvalCase, EvalResult, map_all
from .losses import LossConfig, batch_set_loss, denoising_loss, match_predictions
from .models.detectors import Detector, ModelOutput, build_model
from .patches import MergeConfig, merge_predictions, sliding_infer, tile_volume
from .synth import augment, sample_training_patch
from .tensor import Tensor

log = logging.getLogger(__name__)


def poly_lr(epoch: float, total_epochs: float, base_lr: float = 1e-4, exponent: float = 0.9) -> float:
    """``base_lr * (1 - epoch / total_epochs) ** exponent``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1.0 - epoch / total_epochs) ** exponent


class AdamW:
    """Adam with decoupled weight decay; moments are kept in float64."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {k}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            w = p.data.astype(np.float64)
            if weight_decay:
                w = w * (1.0 - lr * weight_decay)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            w = w - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = w.astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam/step"])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"adam.v/{k}"], dtype=np.float64)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def detection_loss(out: ModelOutput, targets, variant: str, cfg: LossConfig = LossConfig(),
                   aux: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Set loss of every decoder layer (or only the last), the encoder proposals and denoising."""
    num_boxes = sum(len(np.asarray(lbl).reshape(-1)) for lbl, _ in targets)
    sets = out.layers if aux else out.layers[-1:]
    parts: dict[str, float] = {}
    total = None
    named = [(f"dec{i}", s) for i, s in enumerate(sets)]
    if out.enc is not None:
        named.append(("enc", out.enc))
    for name, det in named:
        asg = [match_predictions(det.logits.data[b], det.boxes.data[b], lbl, bx, cfg.match)
               for b, (lbl, bx) in enumerate(targets)]
        loss = batch_set_loss(det.logits, det.boxes, targets, asg, variant, cfg, num_boxes)["total"]
        parts[name] = float(loss.data)
        total = loss if total is None else total + loss
    dn_sets = out.dn_layers if aux else out.dn_layers[-1:]
    for i, det in enumerate(dn_sets):
        loss = denoising_loss(det.logits, det.boxes, out.dn, variant, cfg)["total"]
        parts[f"dn{i}"] = float(loss.data)
        total = total + loss
    return total, parts


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1, int(step)]))


def sample_batch(cases, run: RunConfig, rng: np.random.Generator):
    tc = run.train
    patches, targets = [], []
    for _ in range(tc.batch_size):
        vol, ann = cases[int(rng.integers(len(cases)))]
        if tc.augment:
            vol, ann = augment(vol, ann, rng, tc.max_rot_deg, tc.min_scale)
        patch, target, _ = sample_training_patch(vol, ann, run.model.patch_size, tc.fg_bias, rng)
        patches.append(patch)
        targets.append(target)
    return np.stack(patches), targets


def format_log_line(epoch: int, lr: float, loss: float, val_map: float | None = None) -> str:
    line = f"epoch={epoch} lr={lr:.6e} loss={loss:.8f}"
    if val_map is not None:
        line += f" val_map={val_map:.6f}"
    return line


def predict_cases(model: Detector, cases, run: RunConfig) -> dict:
    """Merged global predictions per volume id."""
    mc = run.merge
    out = {}
    for vol, _ in cases:
        grid = tile_volume(vol.shape, run.model.patch_size, run.eval.overlap)
        raw = sliding_infer(model, vol.data, grid, mc.score_floor, run.eval.batch_size, mc.border_weighting)
        out[vol.id] = merge_predictions(raw, mc)
    return out


def evaluate_predictions(predictions: dict, cases, iou_threshold: float) -> EvalResult:
    eval_cases = [EvalCase(ann.id, ann.boxes, predictions.get(ann.id, [])) for _, ann in cases]
    return map_all(eval_cases, iou_threshold)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)
    val_maps: list[float | None] = field(default_factory=list)
    seconds: float = 0.0


class Trainer:
    """Sample -> forward -> match -> loss -> backward -> clip -> AdamW with PolyLR.

    Every step draws from its own generator seeded by ``(seed, step)``, so a
    resumed run only needs the parameters and optimizer moments to continue
    bit-identically.
    """

    def __init__(self, run: RunConfig, train_cases, val_cases=None, model: Detector | None = None,
                 echo=None):
        self.run = run
        self.cases = list(train_cases)
        if not self.cases:
            raise ValueError("no training cases")
        self.val_cases = list(val_cases or [])
        self.model = model if model is not None else build_model(run.model)
        self.opt = AdamW(self.model.named_parameters())
        self.epoch = 0
        self.result = TrainResult()
        self.echo = echo

    @property
    def total_steps(self) -> int:
        return self.run.train.epochs * self.run.train.batches_per_epoch

    def lr_at(self, step: int) -> float:
        tc = self.run.train
        return poly_lr(step / tc.batches_per_epoch, tc.epochs, tc.base_lr, tc.poly_exponent)

    def train_step(self, step: int) -> float:
        tc = self.run.train
        rng = step_rng(tc.seed, step)
        patches, targets = sample_batch(self.cases, self.run, rng)
        self.model.zero_grad()
        out = self.model.forward(patches, train=True, targets=targets, rng=rng)
        loss, _ = detection_loss(out, targets, self.run.model.variant, self.run.loss, tc.aux_loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step} (batch seed {tc.seed}, {step})")
        loss.backward()
        clip_grad_norm(self.opt.params.values(), tc.grad_clip)
        self.opt.step(self.lr_at(step), tc.weight_decay)
        return value

    def validate(self) -> float:
        preds = predict_cases(self.model, self.val_cases, self.run)
        return evaluate_predictions(preds, self.val_cases, self.run.eval.iou_threshold).map

    def fit(self, out_dir=None, epochs: int | None = None) -> TrainResult:
        """Train up to ``epochs`` (default: the configured total), checkpointing each epoch."""
        tc = self.run.train
        stop = tc.epochs if epochs is None else min(epochs, tc.epochs)
        t0 = time.process_time()
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_config(self.run, out / "config.yaml")
        while self.epoch < stop:
            e = self.epoch
            start = e * tc.batches_per_epoch
            lr = self.lr_at(start)
            losses = [self.train_step(s) for s in range(start, start + tc.batches_per_epoch)]
            mean = float(np.mean(losses))
            val = None
            if tc.val_every and self.val_cases and (e + 1) % tc.val_every == 0:
                val = self.validate()
            self.epoch += 1
            line = format_log_line(e, lr, mean, val)
            r = self.result
            r.step_losses.extend(losses)
            r.epoch_losses.append(mean)
            r.val_maps.append(val)
            r.log_lines.append(line)
            log.info(line)
            if self.echo is not None:
                self.echo(line)
            if out is not None:
                with open(out / "train.log", "a") as fh:
                    fh.write(line + "\n")
                self.save(out / "checkpoint.vspe")
        self.result.seconds += time.process_time() - t0
        return self.result

    def save(self, path) -> None:
        extra = self.opt.state_dict()
        extra["train/epoch"] = np.array(float(self.epoch))
        checkpoint.save_model(path, self.model, extra)

    def resume(self, path) -> None:
        extra = checkpoint.load_model(path, self.model)
        self.opt = AdamW(self.model.named_parameters())
        self.opt.load_state_dict(extra)
        self.epoch = int(extra["train/epoch"])


def write_losses(result: TrainResult, path) -> None:
    Path(path).write_text(json.dumps({"epoch_losses": result.epoch_losses,
                                      "step_losses": result.step_losses}, indent=1) + "\n")


__all__ = ["poly_lr", "AdamW", "clip_grad_norm", "detection_loss", "Trainer", "TrainResult",
           "predict_cases", "evaluate_predictions", "format_log_line", "sample_batch", "MergeConfig"]
