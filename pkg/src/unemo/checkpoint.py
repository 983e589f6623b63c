"""Binary checkpoint format shared by the navigator and the auto-encoder.

Layout, all integers little-endian::

    b"UNMO"                       magic
    u32   version                 (currently 1)
    32B   config digest           sha256 of the serialized run config
    5×u32 d_model, z_dim, s_dim, feature_dim, vocab_size
    u32   tensor count
    per tensor:
        u32 name length, name bytes (utf-8)
        u8  dtype tag (1 = float32, 2 = float64)
        u32 rank, rank×u32 dims
        payload, row-major little-endian
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import FormatError

MAGIC = b"UNMO"
VERSION = 1
DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_TAG_DTYPES = {v: k.newbyteorder("<") for k, v in DTYPE_TAGS.items()}
DIM_FIELDS = ("d_model", "z_dim", "s_dim", "feature_dim", "vocab_size")


@dataclass
class Checkpoint:
    digest: bytes
    dims: tuple[int, ...]
    tensors: "OrderedDict[str, np.ndarray]"

    def dims_dict(self) -> dict[str, int]:
        return dict(zip(DIM_FIELDS, self.dims))


def model_dims(model: ModelConfig) -> tuple[int, ...]:
    return (model.d_model, model.z_dim, model.s_dim, model.feature_dim, model.vocab_size)


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise FormatError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.digest, struct.pack("<5I", *ckpt.dims),
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_TAGS:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} not supported (expected {VERSION})")
    digest = r.take(32)
    dims = r.unpack("<5I")
    (count,) = r.unpack("<I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return Checkpoint(digest, tuple(dims), tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
