"""Binary checkpoint format.

Layout (all integers little-endian)::

    bytes 0..7     magic b"DSEDCKPT"
    bytes 8..11    uint32 format version (currently 1)
    bytes 12..19   uint64 manifest length L in bytes
    bytes 20..20+L UTF-8 JSON manifest:
                     {"format_version": 1,
                      "params": [{"name": str, "shape": [int, ...]}, ...],
                      "meta": {...}}          # model config, arch hash, etc.
    remainder      one float64 little-endian payload per manifest entry, in
                   manifest order, each prod(shape) values in row-major order

Nothing follows the last payload; trailing bytes are a format error.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DSEDCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None):
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "params": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 20
    manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    offset = start + mlen
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, manifest.get("meta", {})
