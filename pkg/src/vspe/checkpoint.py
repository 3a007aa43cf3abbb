"""Binary checkpoint container.

Layout, all integers little-endian::

    b"VSPE"                      magic
    u32                          format version
    32 bytes                     config digest (sha256)
    u32                          record count
    per record:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u64 extents
        prod(extents) x f64 values, C order

Values are stored as float64, so float32 and float64 tensors round-trip
bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"VSPE"
VERSION = 1
DIGEST_BYTES = 32


def encode(tensors: dict[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"config digest must be {DIGEST_BYTES} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), bytes(digest), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[bytes, dict[str, np.ndarray]]:
    """``(digest, {name: float64 array})``; raises DataError on any malformed input."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise DataError("checkpoint is truncated")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    digest = take(DIGEST_BYTES)
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = values
    if pos != len(view):
        raise DataError("trailing bytes after the last checkpoint record")
    return digest, tensors


def save(path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(encode(tensors, digest))
    tmp.replace(p)


def load(path, expected_digest: bytes | None = None) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    digest, tensors = decode(blob)
    if expected_digest is not None and digest != expected_digest:
        raise DataError(f"checkpoint {path} was written for a different model config")
    return tensors


def save_model(path, model, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    save(path, tensors, model.cfg.digest())


def load_model(path, model) -> dict[str, np.ndarray]:
    """Load parameters into ``model``; returns the non-parameter records."""
    tensors = load(path, model.cfg.digest())
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} does not fit the model: {exc}") from exc
    return {k: v for k, v in tensors.items() if not k.startswith("param/")}
