"""Binary checkpoint codec shared by every trained stage.

Layout (all integers little-endian uint32)::

    b"SEMRECK\\0"            8-byte magic
    version
    hash_len, hash bytes      config hash (ascii)
    n_blocks
    per block: name_len, name (utf-8), ndim, dims..., float32 payload

A JSON sidecar ``<file>.meta.json`` carries free-form metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEMRECK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n):
    return struct.pack("<I", n)


def save_arrays(path, arrays, config_hash="", meta=None):
    path = Path(path)
    chunks = [MAGIC, _u32(VERSION), _u32(len(config_hash)), config_hash.encode("ascii"), _u32(len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw_name = name.encode()
        chunks += [_u32(len(raw_name)), raw_name, _u32(arr.ndim)]
        chunks += [_u32(n) for n in arr.shape]
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = dict(meta or {})
    sidecar.setdefault("config_hash", config_hash)
    sidecar.setdefault("format_version", VERSION)
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_arrays(path):
    """Returns (arrays, config_hash, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def u32():
        nonlocal pos
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return n

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hlen = u32()
    config_hash = raw[pos:pos + hlen].decode("ascii")
    pos += hlen
    arrays = {}
    for _ in range(u32()):
        nlen = u32()
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    side = Path(str(path) + ".meta.json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arrays, config_hash, meta
