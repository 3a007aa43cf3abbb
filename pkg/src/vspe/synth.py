"""Synthetic volumes of ellipsoidal blobs on a noisy background, and their boxes.

File formats
------------
Volume: ``<stem>.raw`` holds little-endian float32 voxels in C order;
``<stem>.json`` is the header ``{"id", "shape", "spacing", "dtype": "<f4"}``.

Annotation: ``<stem>.boxes.json`` is
``{"id", "seed", "index", "boxes": [{"corners": [lo0, lo1, lo2, hi0, hi1, hi2], "class": k}]}``
with corners in voxel units (voxel ``j`` spans ``[j, j + 1)``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import DataError
from .geometry import GlobalBox, box_volume, clip_corners, to_center_size

MAX_PLACEMENT_TRIES = 200


@dataclass
class SynthConfig:
    volume_shape: tuple = (48, 48, 48)
    objects: tuple = (1, 3)  # inclusive range per volume
    radius: tuple = ((0.06, 0.12),)  # per class, fraction of the extent along each axis
    class_weights: tuple | None = None
    contrast: float = 1.0
    noise: float = 0.2
    num_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.objects = tuple(int(n) for n in self.objects)
        self.radius = tuple(tuple(float(r) for r in rr) for rr in self.radius)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    def validate(self) -> None:
        if len(self.volume_shape) != 3 or min(self.volume_shape) <= 0:
            raise ValueError("volume_shape needs three positive extents")
        if self.num_classes not in (1, 2):
            raise ValueError("num_classes must be 1 or 2")
        if len(self.radius) == 1 and self.num_classes == 2:
            self.radius = self.radius * 2
        if len(self.radius) != self.num_classes:
            raise ValueError("one radius range per class is required")
        for lo, hi in self.radius:
            if not 0 < lo <= hi <= 0.5:
                raise ValueError(f"radius range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5")
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ValueError("objects range must satisfy 0 <= lo <= hi")
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            raise ValueError("class_weights needs one entry per class")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def proportions(self) -> np.ndarray:
        w = np.ones(self.num_classes) if self.class_weights is None else np.asarray(self.class_weights)
        return w / w.sum()

    def to_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "objects": list(self.objects),
            "radius": [list(r) for r in self.radius],
            "class_weights": None if self.class_weights is None else list(self.class_weights),
            "contrast": self.contrast,
            "noise": self.noise,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class Volume:
    data: np.ndarray
    id: str
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class Ellipsoid:
    center: np.ndarray  # continuous voxel coordinates
    radii: np.ndarray
    rotation: np.ndarray  # columns are the principal axes
    label: int = 0


@dataclass
class Annotation:
    id: str
    boxes: list[GlobalBox] = field(default_factory=list)
    seed: int = 0
    index: int = 0
    objects: list[Ellipsoid] = field(default_factory=list)

    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.boxes], dtype=np.int64)

    def corners(self) -> np.ndarray:
        return np.array([b.corners for b in self.boxes], dtype=np.float64).reshape(-1, 6)


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def ellipsoid_support(shape, obj: Ellipsoid) -> np.ndarray:
    """Boolean mask of the voxels whose centres lie inside ``obj``."""
    grids = np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij")
    p = np.stack(grids, axis=-1) - obj.center
    local = p @ obj.rotation
    return np.sum((local / obj.radii) ** 2, axis=-1) <= 1.0


def _support_window(shape, obj: Ellipsoid):
    reach = np.abs(obj.rotation) @ obj.radii
    lo = np.clip(np.floor(obj.center - reach).astype(int), 0, shape)
    hi = np.clip(np.ceil(obj.center + reach).astype(int) + 1, 0, shape)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.meshgrid(*[np.arange(a, b) + 0.5 for a, b in zip(lo, hi)], indexing="ij")
    p = np.stack(grids, axis=-1) - obj.center
    inside = np.sum(((p @ obj.rotation) / obj.radii) ** 2, axis=-1) <= 1.0
    return sl, lo, inside


def tight_box(shape, obj: Ellipsoid) -> np.ndarray | None:
    """Corners of the smallest voxel-aligned box holding the support, or None if empty."""
    _, lo, inside = _support_window(shape, obj)
    idx = np.nonzero(inside)
    if not len(idx[0]):
        return None
    mins = np.array([i.min() for i in idx]) + lo
    maxs = np.array([i.max() for i in idx]) + lo + 1
    return np.concatenate([mins, maxs]).astype(np.float64)


def _place(cfg: SynthConfig, rng: np.random.Generator, count: int) -> list[Ellipsoid]:
    shape = np.asarray(cfg.volume_shape, dtype=np.float64)
    labels = rng.choice(cfg.num_classes, size=count, p=cfg.proportions())
    placed: list[Ellipsoid] = []
    for label in labels:
        lo, hi = cfg.radius[int(label)]
        for _ in range(MAX_PLACEMENT_TRIES):
            radii = rng.uniform(lo, hi, size=3) * shape
            rot = Rotation.random(random_state=rng).as_matrix()
            r_max = radii.max()
            low = np.minimum(r_max + 1.0, shape / 2)
            center = rng.uniform(low, shape - low)
            if any(np.linalg.norm(center - o.center) <= r_max + o.radii.max() for o in placed):
                continue
            obj = Ellipsoid(center, radii, rot, int(label))
            if tight_box(cfg.volume_shape, obj) is None:
                continue
            placed.append(obj)
            break
        else:
            raise DataError(f"could not place {count} objects without collision "
                            f"after {MAX_PLACEMENT_TRIES} tries")
    return placed


def class_intensity(cfg: SynthConfig, label: int) -> float:
    return cfg.contrast * (1.0 + 0.5 * label)


def generate_case(cfg: SynthConfig, index: int) -> tuple[Volume, Annotation]:
    """Volume and boxes for case ``index``; a pure function of ``(cfg, index)``."""
    rng = case_rng(cfg.seed, index)
    lo, hi = cfg.objects
    count = int(rng.integers(lo, hi + 1))
    objects = _place(cfg, rng, count)
    data, boxes = render_volume(cfg, objects, rng)
    cid = case_id(index)
    return Volume(data, cid), Annotation(cid, boxes, cfg.seed, index, objects)


def render_volume(cfg: SynthConfig, objects: list[Ellipsoid], rng: np.random.Generator):
    """Noise background plus the given ellipsoids; returns float32 data and their tight boxes."""
    data = rng.normal(0.0, cfg.noise, size=cfg.volume_shape) if cfg.noise > 0 else np.zeros(cfg.volume_shape)
    boxes = []
    for obj in objects:
        sl, _, inside = _support_window(cfg.volume_shape, obj)
        data[sl][inside] += class_intensity(cfg, obj.label)
        boxes.append(GlobalBox(tight_box(cfg.volume_shape, obj), label=obj.label, score=1.0))
    return data.astype(np.float32), boxes


def generate_dataset(cfg: SynthConfig, num_cases: int) -> list[tuple[Volume, Annotation]]:
    return [generate_case(cfg, i) for i in range(num_cases)]


# -- augmentation --------------------------------------------------------------------------


def random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def transform_box(corners, matrix: np.ndarray, center: np.ndarray, shape) -> np.ndarray:
    """Map the eight corners through ``x -> center + matrix (x - center)``, re-enclose and clip."""
    c = np.asarray(corners, dtype=np.float64)
    lo, hi = c[:3], c[3:]
    pts = np.array([[(hi if (k >> a) & 1 else lo)[a] for a in range(3)] for k in range(8)])
    mapped = center + (pts - center) @ matrix.T
    out = np.concatenate([mapped.min(axis=0), mapped.max(axis=0)])
    return clip_corners(out, shape)


def apply_affine(volume: Volume, annotation: Annotation, matrix: np.ndarray) -> tuple[Volume, Annotation]:
    """Resample ``volume`` under ``x -> c + matrix (x - c)`` about its centre (trilinear, zero fill)."""
    shape = np.asarray(volume.shape, dtype=np.float64)
    center = shape / 2.0
    inv = np.linalg.inv(matrix)
    # index j sits at continuous coordinate j + 0.5
    shift = center - 0.5
    offset = shift - inv @ shift
    data = ndimage.affine_transform(volume.data.astype(np.float64), inv, offset=offset,
                                    order=1, mode="constant", cval=0.0)
    boxes, objects = [], []
    for box in annotation.boxes:
        c = transform_box(box.corners, matrix, center, volume.shape)
        if box_volume(c) > 0:
            boxes.append(GlobalBox(c, box.label, box.score))
    for obj in annotation.objects:
        scale = float(np.cbrt(abs(np.linalg.det(matrix))))
        rot = matrix / scale
        objects.append(Ellipsoid(center + rot @ (obj.center - center) * scale, obj.radii * scale,
                                 rot @ obj.rotation, obj.label))
    out_ann = Annotation(annotation.id, boxes, annotation.seed, annotation.index, objects)
    return Volume(data.astype(np.float32), volume.id, volume.spacing), out_ann


def augment(volume: Volume, annotation: Annotation, rng: np.random.Generator,
            max_rot_deg: float = 20.0, min_scale: float = 0.8) -> tuple[Volume, Annotation]:
    """Random rotation (about a random axis, at most ``max_rot_deg``) and isotropic down-scaling."""
    rot = random_rotation(rng, max_rot_deg)
    scale = rng.uniform(min_scale, 1.0)
    return apply_affine(volume, annotation, scale * rot)


# -- patch sampling --------------------------------------------------------------------------


MIN_VISIBLE_FRACTION = 0.1


def pad_to(data: np.ndarray, shape) -> np.ndarray:
    """Zero-pad at the high end of each axis up to ``shape`` (never crops)."""
    pad = [(0, max(int(s) - n, 0)) for n, s in zip(data.shape, shape)]
    return np.pad(data, pad) if any(p[1] for p in pad) else data


def clip_to_patch(corners: np.ndarray, labels: np.ndarray, offset, patch_size,
                  min_fraction: float = MIN_VISIBLE_FRACTION):
    """Patch-normalised center-size boxes of the objects that stay visible enough.

    Boxes are clipped to the patch; one whose clipped volume is below
    ``min_fraction`` of its full volume is dropped.
    """
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 6)
    offset = np.asarray(offset, dtype=np.float64)
    size = np.asarray(patch_size, dtype=np.float64)
    local = corners - np.concatenate([offset, offset])
    clipped = clip_corners(local, size)
    full = box_volume(local)
    keep = (box_volume(clipped) >= min_fraction * full) & (box_volume(clipped) > 0)
    norm = clipped[keep] / np.concatenate([size, size])
    boxes = to_center_size(norm) if len(norm) else np.zeros((0, 6))
    return np.asarray(labels, dtype=np.int64)[keep], boxes


def sample_training_patch(volume: Volume, annotation: Annotation, patch_size, fg_bias: float,
                          rng: np.random.Generator):
    """Random patch, centred near an object with probability ``fg_bias``.

    Returns:
        ``(patch [1, D, H, W] float32, (labels [M], boxes [M, 6]), offset)``
    """
    patch_size = tuple(int(p) for p in patch_size)
    data = pad_to(volume.data, patch_size)
    shape = np.asarray(data.shape)
    size = np.asarray(patch_size)
    high = shape - size
    if annotation.boxes and rng.uniform() < fg_bias:
        box = annotation.boxes[int(rng.integers(len(annotation.boxes)))]
        center = 0.5 * (box.corners[:3] + box.corners[3:])
        jitter = rng.uniform(-0.25, 0.25, size=3) * size
        offset = np.clip(np.round(center - size / 2 + jitter).astype(int), 0, high)
    else:
        offset = np.array([int(rng.integers(h + 1)) for h in high])
    sl = tuple(slice(o, o + p) for o, p in zip(offset, size))
    patch = data[sl][None].astype(np.float32)
    labels, boxes = clip_to_patch(annotation.corners(), annotation.labels(), offset, size)
    return patch, (labels, boxes), offset


# -- files -------------------------------------------------------------------------------------


def write_volume(volume: Volume, directory) -> Path:
    """Write ``<id>.raw`` and its ``<id>.json`` header; returns the header path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw = d / f"{volume.id}.raw"
    raw.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    header = {"id": volume.id, "shape": list(volume.shape), "spacing": float(volume.spacing), "dtype": "<f4"}
    path = d / f"{volume.id}.json"
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def read_volume(header_path) -> Volume:
    path = Path(header_path)
    try:
        header = json.loads(path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        if header.get("dtype", "<f4") != "<f4":
            raise DataError(f"{path}: unsupported dtype {header['dtype']!r}")
        raw = path.with_suffix(".raw").read_bytes()
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataError(f"{path}: raw file holds {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, str(header["id"]), float(header.get("spacing", 1.0)))


def annotation_to_dict(ann: Annotation) -> dict:
    return {
        "id": ann.id,
        "seed": int(ann.seed),
        "index": int(ann.index),
        "boxes": [{"corners": [float(v) for v in b.corners], "class": int(b.label)} for b in ann.boxes],
    }


def annotation_from_dict(d: dict) -> Annotation:
    try:
        boxes = [GlobalBox(b["corners"], int(b["class"]), 1.0) for b in d["boxes"]]
        return Annotation(str(d["id"]), boxes, int(d.get("seed", 0)), int(d.get("index", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed annotation record: {exc}") from exc


def write_annotation(ann: Annotation, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{ann.id}.boxes.json"
    path.write_text(json.dumps(annotation_to_dict(ann), indent=2) + "\n")
    return path


def read_annotation(path) -> Annotation:
    try:
        return annotation_from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read annotation {path}: {exc}") from exc


def write_dataset(cases, directory, cfg: SynthConfig | None = None) -> str:
    """Write every case plus a ``manifest.json``; returns the dataset digest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for vol, ann in cases:
        write_volume(vol, d)
        write_annotation(ann, d)
        ids.append(vol.id)
    digest = dataset_digest(cases)
    manifest = {"cases": ids, "digest": digest}
    if cfg is not None:
        manifest["synth"] = cfg.to_dict()
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return digest


def read_dataset(directory) -> list[tuple[Volume, Annotation]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset manifest in {d}: {exc}") from exc
    return [(read_volume(d / f"{cid}.json"), read_annotation(d / f"{cid}.boxes.json"))
            for cid in manifest["cases"]]


def dataset_digest(cases) -> str:
    h = hashlib.sha256()
    for vol, ann in cases:
        h.update(vol.id.encode())
        h.update(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
        h.update(json.dumps(annotation_to_dict(ann), sort_keys=True).encode())
    return h.hexdigest()
