"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"DRCK" | version | header_len | header (UTF-8 JSON) | n_records |
    n_records x (name_len | name | 4 dims | dims-product x float64 LE)

Shapes of rank < 4 are padded with trailing 1s; readers reshape.
"""
from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"DRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pad_shape(shape) -> tuple:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store rank-{len(shape)} array")
    return tuple(shape) + (1,) * (4 - len(shape))


def dumps(records: dict, header: dict | None = None) -> bytes:
    buf = io.BytesIO()
    write(buf, records, header)
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, dict]:
    return read(io.BytesIO(blob))


def write(f: BinaryIO, records: dict, header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(head)))
    f.write(head)
    f.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<4I", *_pad_shape(arr.shape)))
        f.write(np.ascontiguousarray(arr).tobytes())


def _take(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def read(f: BinaryIO) -> tuple[dict, dict]:
    """Return ``(header, records)``; every record is a 4-d float64 array."""
    if _take(f, 4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", _take(f, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(_take(f, head_len).decode("utf-8"))
    (count,) = struct.unpack("<I", _take(f, 4))
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _take(f, 4))
        name = _take(f, name_len).decode("utf-8")
        shape = struct.unpack("<4I", _take(f, 16))
        size = int(np.prod(shape))
        values = np.frombuffer(_take(f, 8 * size), dtype="<f8").astype(np.float64)
        records[name] = values.reshape(shape)
    return header, records


def save(path, records: dict, header: dict | None = None) -> None:
    with open(path, "wb") as f:
        write(f, records, header)


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        return read(f)
