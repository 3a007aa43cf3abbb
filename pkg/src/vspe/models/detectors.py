"""The three detector variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..losses import DenoisingBatch, build_denoising_batch
from ..nn import MLP, Embedding, LayerNorm, Linear, Module, param
from ..tensor import Tensor
from .config import ModelConfig
from .layers import (
    Backbone,
    ConditionalDecoderLayer,
    DecoderLayer,
    DeformableDecoderLayer,
    DeformableEncoderLayer,
    EncoderLayer,
    flatten_tokens,
    inverse_sigmoid,
    prior_bias,
)
from .position import channels_per_axis, positional_encoding_3d, sine_embed

BOX_LOGIT_LIMIT = 10.0


@dataclass
class DetectionSet:
    """Per-query class logits ``[B, Q, K + 1]`` and boxes ``[B, Q, 6]``."""

    logits: Tensor
    boxes: Tensor

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)

    def __len__(self) -> int:
        return self.logits.shape[1]


@dataclass
class ModelOutput:
    layers: list[DetectionSet]
    enc: DetectionSet | None = None
    dn_layers: list[DetectionSet] = field(default_factory=list)
    dn: DenoisingBatch | None = None
    references: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> DetectionSet:
        return self.layers[-1]


def _box_from_reference(delta: Tensor, reference) -> Tensor:
    """sigmoid(delta + inverse_sigmoid(reference)), clamped before the sigmoid."""
    if isinstance(reference, Tensor):
        ref = reference.inverse_sigmoid()
    else:
        ref = Tensor(inverse_sigmoid(reference), dtype=delta.dtype)
    if ref.shape[-1] == 3:
        zeros = Tensor(np.zeros(ref.shape, dtype=delta.dtype))
        ref = T.concat([ref, zeros], axis=-1)
    return (delta + ref).clamp(-BOX_LOGIT_LIMIT, BOX_LOGIT_LIMIT).sigmoid()


class Detector(Module):
    """Shared pieces: backbone, level projections and prediction heads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = np.random.default_rng(cfg.init_seed)
        self._rng = rng
        E = cfg.hidden_dim
        self.backbone = Backbone(cfg.backbone_channels, cfg.stem_channels, rng, dt)
        used = cfg.backbone_channels[-cfg.num_levels:]
        self.input_proj = [Linear(c, E, rng, dt) for c in used]
        self.class_head = Linear(E, cfg.num_classes + 1, rng, dt)
        if cfg.variant != "detr":
            self.class_head.bias.data[-1] = -prior_bias(0.01)
        self.box_head = MLP(E, E, 6, 3, rng, dt)
        last = self.box_head.layers[-1]
        last.weight.data[...] = 0
        last.bias.data[...] = 0
        self.dec_norm = LayerNorm(E, dt)
        shapes = cfg.level_shapes()[-cfg.num_levels:]
        self.shapes = [tuple(s) for s in shapes]
        pe = [positional_encoding_3d(s, E, normalize=True) for s in self.shapes]
        self._pos = [p.astype(dt) for p in pe]

    def _check_input(self, patch) -> Tensor:
        x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch), dtype=self.cfg.np_dtype)
        if x.dtype != self.cfg.np_dtype:
            x = Tensor(x.data, dtype=self.cfg.np_dtype)
        if x.ndim == 4:
            x = x.unsqueeze(0)
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.cfg.patch_size:
            raise ValueError(f"patch shape {x.shape} does not match configured patch {self.cfg.patch_size}")
        return x

    def features(self, patch) -> tuple[list[Tensor], list[Tensor]]:
        """Backbone pyramid and projected tokens of the levels the transformer reads."""
        x = self._check_input(patch)
        pyramid = self.backbone(x)
        levels = pyramid[-self.cfg.num_levels:]
        tokens = [proj(flatten_tokens(f)) for proj, f in zip(self.input_proj, levels)]
        return pyramid, tokens

    def predict(self, hidden: Tensor, reference=None) -> DetectionSet:
        out = self.dec_norm(hidden)
        logits = self.class_head(out)
        delta = self.box_head(out)
        if reference is None:
            boxes = delta.clamp(-BOX_LOGIT_LIMIT, BOX_LOGIT_LIMIT).sigmoid()
        else:
            boxes = _box_from_reference(delta, reference)
        return DetectionSet(logits, boxes)


class DETR(Detector):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng, dt, E = self._rng, cfg.np_dtype, cfg.hidden_dim
        self.query_embed = param(rng.normal(0, 1, size=(cfg.num_queries, E)), dt)
        self.encoder = [EncoderLayer(E, cfg.heads, cfg.ffn_dim, rng, dt) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(E, cfg.heads, cfg.ffn_dim, rng, dt) for _ in range(cfg.dec_layers)]

    def encode(self, tokens: Tensor, pos) -> Tensor:
        memory = tokens
        for layer in self.encoder:
            memory = layer(memory, pos)
        return memory

    def forward(self, patch, train: bool = False, targets=None, rng=None) -> ModelOutput:
        _, tokens = self.features(patch)
        src = tokens[0]
        pos = Tensor(self._pos[0][None])
        memory = self.encode(src, pos)
        B = src.shape[0]
        tgt = Tensor(np.zeros((B, self.cfg.num_queries, self.cfg.hidden_dim), dtype=self.cfg.np_dtype))
        qpos = self.query_embed.unsqueeze(0)
        layers = []
        for layer in self.decoder:
            tgt = layer(tgt, qpos, memory, pos)
            layers.append(self.predict(tgt))
        return ModelOutput(layers)

    __call__ = forward


class ConditionalDETR(Detector):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng, dt, E = self._rng, cfg.np_dtype, cfg.hidden_dim
        self.query_embed = param(rng.normal(0, 1, size=(cfg.num_queries, E)), dt)
        self.ref_point_head = MLP(E, E, 3, 2, rng, dt)
        self.query_scale = MLP(E, E, E, 2, rng, dt)
        self.encoder = [EncoderLayer(E, cfg.heads, cfg.ffn_dim, rng, dt) for _ in range(cfg.enc_layers)]
        self.decoder = [ConditionalDecoderLayer(E, cfg.heads, cfg.ffn_dim, rng, dt) for _ in range(cfg.dec_layers)]

    def reference_points(self) -> Tensor:
        return self.ref_point_head(self.query_embed).sigmoid()

    def forward(self, patch, train: bool = False, targets=None, rng=None) -> ModelOutput:
        _, tokens = self.features(patch)
        src = tokens[0]
        pos = Tensor(self._pos[0][None])
        memory = src
        for layer in self.encoder:
            memory = layer(memory, pos)
        B = src.shape[0]
        E = self.cfg.hidden_dim
        tgt = Tensor(np.zeros((B, self.cfg.num_queries, E), dtype=self.cfg.np_dtype))
        qpos = self.query_embed.unsqueeze(0)
        ref = self.reference_points()  # [Q, 3]
        ref_embed = sine_embed(ref, E).unsqueeze(0)
        layers, refs = [], []
        for i, layer in enumerate(self.decoder):
            spatial = ref_embed if i == 0 else ref_embed * self.query_scale(tgt)
            tgt = layer(tgt, qpos, spatial, memory, pos, first=(i == 0))
            ref_b = ref.unsqueeze(0).expand((B,) + ref.shape)
            layers.append(self.predict(tgt, ref_b))
            refs.append(np.broadcast_to(ref.data, (B,) + ref.shape).copy())
        return ModelOutput(layers, references=refs)

    __call__ = forward


def _token_anchors(shapes, base_size: float = 0.05) -> np.ndarray:
    """Center-size anchor per token: its voxel centre, extent ``base * 2^level``."""
    out = []
    for lvl, shape in enumerate(shapes):
        grids = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in shape], indexing="ij")
        centers = np.stack([g.reshape(-1) for g in grids], axis=-1)
        size = np.full_like(centers, base_size * 2.0**lvl)
        out.append(np.concatenate([centers, size], axis=-1))
    return np.concatenate(out, axis=0)


def top_k_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; equal scores keep token order."""
    scores = np.asarray(scores)
    if k > scores.shape[-1]:
        raise ValueError(f"cannot select {k} queries from {scores.shape[-1]} tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


class DINODETR(Detector):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng, dt, E = self._rng, cfg.np_dtype, cfg.hidden_dim
        L, P = cfg.num_levels, cfg.num_points
        self.input_norm = [LayerNorm(E, dt) for _ in range(L)]
        self.level_embed = param(rng.normal(0, 1, size=(L, E)), dt)
        self.encoder = [DeformableEncoderLayer(E, cfg.heads, cfg.ffn_dim, L, P, rng, dt)
                        for _ in range(cfg.enc_layers)]
        self.enc_output = Linear(E, E, rng, dt)
        self.enc_norm = LayerNorm(E, dt)
        self.enc_class = Linear(E, cfg.num_classes + 1, rng, dt)
        self.enc_class.bias.data[-1] = -prior_bias(0.01)
        self.enc_box = MLP(E, E, 6, 3, rng, dt)
        self.enc_box.layers[-1].weight.data[...] = 0
        self.enc_box.layers[-1].bias.data[...] = 0
        self.decoder = [DeformableDecoderLayer(E, cfg.heads, cfg.ffn_dim, L, P, rng, dt)
                        for _ in range(cfg.dec_layers)]
        per = channels_per_axis(E, 3) if E >= 6 else 2
        self._ref_embed_dim = 6 * per
        self.ref_point_head = MLP(self._ref_embed_dim, E, E, 2, rng, dt)
        self.label_enc = Embedding(cfg.num_classes + 1, E, rng, dt)
        self.anchors = _token_anchors(self.shapes)
        self.token_refs = self.anchors[:, :3]
        self.last_selection = None

    def _stop(self, value: np.ndarray) -> np.ndarray:
        """A value that receives no gradient (recorded/replayed by an active PieceTape)."""
        return T.frozen(np.array(value, copy=True))

    def query_pos(self, reference: np.ndarray) -> Tensor:
        emb = sine_embed(reference, self._ref_embed_dim).astype(self.cfg.np_dtype)
        return self.ref_point_head(Tensor(emb))

    def encode(self, tokens: list[Tensor]) -> tuple[Tensor, Tensor]:
        src = T.concat([norm(t) for norm, t in zip(self.input_norm, tokens)], axis=1)
        pos_parts = [Tensor(p[None]) + self.level_embed[i].reshape(1, 1, -1) for i, p in enumerate(self._pos)]
        pos = T.concat(pos_parts, axis=1)
        B = src.shape[0]
        ref = np.broadcast_to(self.token_refs[None], (B,) + self.token_refs.shape)
        memory = src
        for layer in self.encoder:
            memory = layer(memory, pos, ref, self.shapes)
        return memory, pos

    def two_stage_init(self, memory: Tensor):
        """Proposals from every encoder token; the top ``num_queries`` seed the decoder.

        Returns the encoder DetectionSet restricted to the selected tokens,
        the (detached) reference boxes and the query content.
        """
        cfg = self.cfg
        out_mem = self.enc_norm(self.enc_output(memory))
        logits = self.enc_class(out_mem)
        anchors = np.broadcast_to(self.anchors[None], (memory.shape[0],) + self.anchors.shape)
        boxes = _box_from_reference(self.enc_box(out_mem), anchors)
        z = logits.data - logits.data.max(-1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        objectness = probs[..., :-1].max(-1)
        sel = self._stop(top_k_tokens(objectness, cfg.num_queries))
        self.last_selection = sel
        B = memory.shape[0]
        rows = np.repeat(np.arange(B), cfg.num_queries)
        cols = sel.reshape(-1)
        E = cfg.hidden_dim
        enc_set = DetectionSet(
            logits[rows, cols].reshape(B, cfg.num_queries, -1),
            boxes[rows, cols].reshape(B, cfg.num_queries, 6),
        )
        reference = self._stop(enc_set.boxes.data)
        content = Tensor(self._stop(out_mem[rows, cols].reshape(B, cfg.num_queries, E).data))
        return enc_set, reference, content

    def forward(self, patch, train: bool = False, targets=None, rng=None) -> ModelOutput:
        cfg = self.cfg
        _, tokens = self.features(patch)
        memory, _ = self.encode(tokens)
        enc_set, reference, tgt = self.two_stage_init(memory)
        B, Q = reference.shape[:2]
        dn = None
        mask = None
        if train and cfg.num_dn > 0 and targets is not None:
            if rng is None:
                raise ValueError("denoising queries need an rng in train mode")
            dn = build_denoising_batch(targets, cfg.num_dn, Q, cfg.num_classes,
                                       cfg.box_noise_scale, cfg.label_flip_prob, rng)
        n_dn = 0
        if dn is not None:
            n_dn = dn.num_dn
            tgt = T.concat([self.label_enc(dn.labels), tgt], axis=1)
            reference = np.concatenate([dn.boxes.astype(reference.dtype), reference], axis=1)
            mask = dn.attn_mask[:, None]
        layers, dn_layers, refs = [], [], []
        for layer in self.decoder:
            qpos = self.query_pos(reference)
            tgt = layer(tgt, qpos, reference, memory, self.shapes, mask)
            det = self.predict(tgt, reference)
            refs.append(reference[:, n_dn:].copy())
            # refined boxes become the next layer's references, without gradient
            reference = self._stop(det.boxes.data)
            if n_dn:
                dn_layers.append(DetectionSet(det.logits[:, :n_dn], det.boxes[:, :n_dn]))
                det = DetectionSet(det.logits[:, n_dn:], det.boxes[:, n_dn:])
            layers.append(det)
        return ModelOutput(layers, enc=enc_set, dn_layers=dn_layers, dn=dn, references=refs)

    __call__ = forward


def build_model(cfg: ModelConfig) -> Detector:
    return {"detr": DETR, "cond": ConditionalDETR, "dino": DINODETR}[cfg.variant](cfg)


def model_forward(model: Detector, patch, train: bool = False, targets=None, rng=None) -> ModelOutput:
    return model.forward(patch, train=train, targets=targets, rng=rng)
