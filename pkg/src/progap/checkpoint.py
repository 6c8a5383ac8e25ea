"""Flat binary container of named float64 tensors.

Layout (little-endian)::

    b"PGCK"  | uint32 version | uint64 header length | JSON header | payload

The header is a JSON list of ``{"name", "shape", "offset"}`` records; offsets
count bytes from the start of the payload and tensors are stored C-ordered
as ``<f8``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    header = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype="<f8")
        header.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    out = {}
    for rec in header:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start + rec["offset"])
        out[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return out
