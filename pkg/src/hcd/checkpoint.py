"""Versioned binary checkpoints.

Layout (little-endian)::

    magic        8 bytes  b"HCDCKPT\\x00"
    version      u32      1
    header_len   u32
    header       utf-8 JSON: {"arrays": [[name, shape], ...], "meta": {...}}
    payload      f64 arrays concatenated in header order

``meta`` holds JSON-serialisable state (epoch, step counters, RNG states).
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HCDCKPT\x00"
VERSION = 1


def dumps(arrays: dict, meta: dict) -> bytes:
    names = list(arrays)
    header = {"arrays": [[n, list(np.shape(arrays[n]))] for n in names], "meta": meta}
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def loads(blob: bytes):
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode())
    off = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return arrays, header["meta"]


def save(path, arrays: dict, meta: dict) -> None:
    """Atomic write: a crash never leaves a truncated checkpoint behind."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path):
    return loads(Path(path).read_bytes())
