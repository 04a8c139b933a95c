"""Binary checkpoint format.

Layout (little-endian): magic ``M3NT``, u32 version, u32 tensor count; per
tensor u16 name length, UTF-8 name, u8 rank, rank x u64 dims, float32
payload; trailing u32 step counter. The run configuration is stored as text
in a sidecar file ``<path>.cfg``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DataError
from .nn import Module

MAGIC = b"M3NT"
VERSION = 1


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int
    config_text: str | None = None


def encode_checkpoint(tensors: dict[str, np.ndarray], step: int) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(struct.pack("<I", step))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    (step,) = struct.unpack("<I", take(4))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")
    return Checkpoint(tensors, step)


def sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".cfg")


def save_checkpoint(path, model: Module, step: int, config_text: str | None = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    Path(path).write_bytes(encode_checkpoint(tensors, step))
    if config_text is not None:
        sidecar(path).write_text(config_text, encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    ck = decode_checkpoint(buf)
    cfg = sidecar(path)
    if cfg.exists():
        ck.config_text = cfg.read_text(encoding="utf-8")
    return ck


def apply_checkpoint(model: Module, ck: Checkpoint, dtype=None) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(ck.tensors):
        missing = sorted(set(params) - set(ck.tensors))
        extra = sorted(set(ck.tensors) - set(params))
        raise CheckpointError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        arr = ck.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(dtype or p.data.dtype)
