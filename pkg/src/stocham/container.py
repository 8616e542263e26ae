"""Self-describing binary container for arrays plus a JSON header.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"STOCHAM\\0"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          array payloads, concatenated in header order

The header holds a ``meta`` object and an ``arrays`` list; each entry has
``name``, ``dtype`` (numpy dtype string, always little-endian), ``shape``,
``offset`` (relative to the payload start) and ``nbytes``. Arrays are stored
C-contiguous (row-major, last index fastest).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any, Mapping

import numpy as np

MAGIC = b"STOCHAM\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind not in "fiub":
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = _canonical(arr)
        b = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"meta": dict(meta or {}), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < _PREFIX.size:
        raise ValueError("truncated container")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError("not a stocham container")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode())
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        buf = data[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def write(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    """Write atomically; returns the sha256 of the bytes written."""
    data = encode(arrays, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
