"""Binary tensor container shared by body models, volumes, body params and checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"PAMIRTC\\0"
    bytes 8..11   uint32 format version
    bytes 12..19  uint64 header length N
    next N bytes  UTF-8 JSON header
    payload       concatenated row-major (C-order) array buffers

The header is ``{"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}``
with offsets relative to the start of the payload. Output is byte-deterministic for
identical inputs (sorted keys, no timestamps).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PAMIRTC\0"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"float32", "float64", "int32", "int64", "uint8", "bool"}


class ContainerError(ValueError):
    pass


def save_tensors(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    buffers = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name]))
        dt = arr.dtype.name
        if dt not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {dt} for array {name!r}")
        buf = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` from a container file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    payload = memoryview(raw)[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated payload for {e['name']!r}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(e["dtype"])
    return arrays, header["meta"]


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
