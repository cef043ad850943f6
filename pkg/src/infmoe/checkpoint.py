"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"IMOE"
    version u32      currently 1
    cfглen  u32      length of the canonical-JSON model config
    config  bytes    json.dumps(config, sort_keys=True, separators=(",",":"))
    count   u32      number of tensors
    per tensor:
        name_len u16, name utf-8
        dtype    u8   1 = float32, 2 = float64
        ndim     u8
        dims     ndim * u32
        data     raw row-major little-endian scalars
    crc32   u32      of every preceding byte

The tensor table is written in the model's deterministic naming order, so
identical parameters always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, init_params

MAGIC = b"IMOE"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}


def config_json(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    named = list(params.named_tensors())
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_json(config)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode()
        arr = np.ascontiguousarray(t.data)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(le.tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack("<" + fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    """Read, integrity-check, and materialize a checkpoint.

    Parameters are rebuilt from the stored config (so the structures match
    the writer's) and then overwritten with the stored buffers.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError("checkpoint too short")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checkpoint integrity check failed (CRC mismatch)")

    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = r.u("I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_len = r.u("I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc

    count = r.u("I")
    tensors = {}
    dtype = np.float64
    for _ in range(count):
        name = r.take(r.u("H")).decode()
        tag = r.u("B")
        ndim = r.u("B")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        dt = _TAG_DTYPES[tag]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt.newbyteorder("<"))
        tensors[name] = arr.astype(dt).reshape(shape)
        dtype = dt
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    params = init_params(config, dtype=dtype)
    expected = dict(params.named_tensors())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names mismatch: missing={missing} extra={extra}")
    for name, t in expected.items():
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        t.data = tensors[name]
    return config, params
