"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"LCST1"
    u32 meta_len, meta_len bytes of UTF-8 JSON
    u32 n_arrays
    n_arrays x (u16 name_len, name, u32 ndim, ndim x u64 dim)
    concatenated array payloads as little-endian 8-byte floats, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LCST1"


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(arrays))]
    body = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(head + body)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:5] != MAGIC:
        raise ContainerError("not an LCST1 container")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ContainerError("truncated container")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (meta_len,) = take("<I")
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ContainerError("corrupt container header") from None
    pos += meta_len
    (count,) = take("<I")
    table = []
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        table.append((name, tuple(int(s) for s in shape)))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(blob):
            raise ContainerError("truncated container payload")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos = end
    return arrays, meta


def save(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
