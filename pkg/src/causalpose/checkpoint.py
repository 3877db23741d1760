"""Binary checkpoint layout (little-endian throughout):

    magic      8 bytes   b"CPOSECKP"
    version    u32       1
    meta_len   u32       length of the JSON metadata block
    meta       bytes     UTF-8 JSON, keys sorted
    count      u32       number of tensors
    table      count x { name_len u16, ndim u8, name bytes, dims u32 * ndim }
    payload    float64 values of each tensor, row-major, in table order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPOSECKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = []
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(buf) - pos})")
    return tensors, meta


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    path = Path(path)
    data = to_bytes(tensors, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())
