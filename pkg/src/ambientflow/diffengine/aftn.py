"""AFTN binary tensor files.

Layout: ``b"AFTN"``, u8 version (1), u8 dtype (1 = little-endian f64),
u32 rank, ``rank`` x u32 dims, then the raw row-major data. An optional JSON
sidecar ``<name>.json`` carries free-form metadata.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import IngestError

MAGIC = b"AFTN"
VERSION = 1
DTYPE_F64 = 1


def encode(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    head = MAGIC + struct.pack("<BBI", VERSION, DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise IngestError(f"{name}: not an AFTN file (bad magic)")
    version, dtype, rank = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise IngestError(f"{name}: unsupported AFTN version {version}")
    if dtype != DTYPE_F64:
        raise IngestError(f"{name}: unsupported dtype code {dtype}")
    off = 10
    if len(buf) < off + 4 * rank:
        raise IngestError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 8 * count:
        raise IngestError(f"{name}: payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save(path, arr, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, encode(arr))
    if meta is not None:
        side = path.with_suffix(".json")
        _atomic_write(side, (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode())
    return path


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror}") from exc
    return decode(buf, str(path))


def load_meta(path) -> dict | None:
    side = Path(path).with_suffix(".json")
    if not side.exists():
        return None
    return json.loads(side.read_text())
