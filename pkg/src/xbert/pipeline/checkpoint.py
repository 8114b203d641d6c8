"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"XBRT"  u32 version
    u32 n    config JSON (n bytes, UTF-8, sorted keys)
    tensors  table: u32 count, then per entry
             u16 name length, name, u8 ndim, u32 dims..., f32 payload
    optim    u32 n meta JSON, tensor table
    queues   u32 n meta JSON, tensor table
    u32 n    RNG state JSON
    u64      step counter

Nothing follows the step counter; trailing or missing bytes are errors.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"XBRT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer_meta: dict = field(default_factory=dict)
    optimizer_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    queue_meta: dict = field(default_factory=dict)
    queue_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    step: int = 0


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_json(obj) -> bytes:
    raw = _json_bytes(obj)
    return struct.pack("<I", len(raw)) + raw


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.floating):
            raise CheckpointError(f"tensor {name!r} must be floating point, got {arr.dtype}")
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} name or rank too large")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _pack_json(ckpt.config),
        _pack_tensors(ckpt.tensors),
        _pack_json(ckpt.optimizer_meta),
        _pack_tensors(ckpt.optimizer_tensors),
        _pack_json(ckpt.queue_meta),
        _pack_tensors(ckpt.queue_tensors),
        _pack_json(ckpt.rng_state),
        struct.pack("<Q", int(ckpt.step)),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.source}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.raw)})"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json(self, what: str):
        (n,) = self.unpack("<I", f"{what} length")
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{self.source}: corrupt {what}: {exc}") from None

    def tensors(self, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{what} count")
        out = {}
        for i in range(count):
            (n,) = self.unpack("<H", f"{what} name length")
            name = self.take(n, f"{what} name").decode("utf-8", errors="strict")
            (ndim,) = self.unpack("<B", f"rank of {name}")
            shape = self.unpack(f"<{ndim}I", f"shape of {name}")
            size = int(np.prod(shape, dtype=np.int64))
            payload = self.take(4 * size, f"payload of {name}")
            if name in out:
                raise CheckpointError(f"{self.source}: duplicate tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return out


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads {VERSION})")
    ckpt = Checkpoint(
        config=r.json("config"),
        tensors=r.tensors("parameters"),
        optimizer_meta=r.json("optimizer meta"),
        optimizer_tensors=r.tensors("optimizer state"),
        queue_meta=r.json("queue meta"),
        queue_tensors=r.tensors("queue payload"),
        rng_state=r.json("rng state"),
        step=r.unpack("<Q", "step counter")[0],
    )
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes after the step counter")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a partial checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return decode(path.read_bytes(), str(path))


def rng_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    name = state.get("bit_generator")
    if name != "PCG64":
        raise CheckpointError(f"unsupported bit generator {name!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


__all__ = [
    "MAGIC",
    "VERSION",
    "Checkpoint",
    "CheckpointError",
    "encode",
    "decode",
    "save_checkpoint",
    "load_checkpoint",
    "rng_to_json",
    "rng_from_json",
]
