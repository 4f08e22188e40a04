"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes  b"ATGCKPT\\0"
    version   u32
    meta_len  u32, followed by meta_len bytes of UTF-8 JSON
    count     u32
    count x { name_len u16, name bytes, ndim u8, ndim x u64 dims,
              prod(dims) x float64 values }
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

MAGIC = b"ATGCKPT\x00"
VERSION = 1


def dumps(params: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _parse(memoryview(blob))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, IngestionError):
            raise
        raise IngestionError(f"corrupt checkpoint: {exc}") from exc


def _parse(view: memoryview) -> tuple[dict[str, np.ndarray], dict]:
    if bytes(view[:8]) != MAGIC:
        raise IngestionError("not a parameter checkpoint (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", view, pos)
    pos += 8
    if version != VERSION:
        raise IngestionError(f"unsupported checkpoint version {version}")
    metadata = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        params[name] = arr
    if pos != len(view):
        raise IngestionError("trailing bytes after checkpoint payload")
    return params, metadata


def save(path: str | Path, params: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, metadata))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
