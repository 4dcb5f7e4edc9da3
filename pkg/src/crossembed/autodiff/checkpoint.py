"""Portable named-parameter checkpoint files.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"XEMBCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 manifest length L in bytes
    20      L     manifest, UTF-8 JSON with sorted keys:
                    {"meta": {...},
                     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    20+L    ...   payload: each tensor's raw little-endian bytes, C order,
                  at ``offset`` bytes from the start of the payload

Tensors are written in sorted-name order so identical parameters always give
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from crossembed.errors import DataError

MAGIC = b"XEMBCKPT"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise DataError(f"unsupported dtype {dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, meta)``; arrays come back in their stored dtype."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(buf[20:20 + mlen].decode())
    base = 20 + mlen
    params = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise DataError(f"{path}: truncated payload for {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["name"]] = arr.astype(e["dtype"])
    return params, manifest["meta"]
