"""Binary checkpoints: a JSON header followed by raw little-endian float64 arrays.

Layout::

    b"CRSDBIN1"                 8-byte magic
    uint64 (LE)                 header length in bytes
    header                      UTF-8 JSON, keys sorted
    array payloads              '<f8', C order, in header["arrays"] order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRSDBIN1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, header: dict, arrays: dict) -> Path:
    path = Path(path)
    specs = []
    payloads = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        specs.append({"name": name, "shape": list(a.shape)})
        payloads.append(a.tobytes(order="C"))
    head = dict(header)
    head["arrays"] = specs
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)
    return path


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
