"""Versioned little-endian checkpoint files.

Layout: b"RDCK", u32 version, u32 n, n bytes of UTF-8 JSON (config snapshot),
u32 tensor count, then per tensor: u32 name length, name, u32 ndim,
ndim x u32 dims, f64 data (row-major).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<II", len(raw), arr.ndim) + raw)
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    meta = json.loads(take(meta_len))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<II", take(8))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(meta, tensors)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())
