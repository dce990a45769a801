"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0-3    magic ``b"RTKC"``
    bytes 4-7    format version (uint32), currently 1
    bytes 8-11   manifest length in bytes (uint32)
    manifest     UTF-8 JSON, sorted keys, compact separators
    payload      raw float32 little-endian array data, row-major,
                 concatenated in manifest order

The manifest holds ``{"version", "config", "meta", "arrays"}`` where each
arrays entry is ``{"name", "kind", "shape", "offset", "size"}``; ``offset``
and ``size`` count float32 elements into the payload. ``kind`` is ``"param"``
for trainable arrays and ``"buffer"`` for state such as running statistics.
Identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RTKC"
VERSION = 1


def save_checkpoint(path, arrays, config=None, meta=None) -> None:
    """Write named arrays (sequence of ``(name, kind, ndarray)``) to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name, kind, arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "size": int(arr32.size)}
        )
        blobs.append(arr32.tobytes())
        offset += int(arr32.size)
    manifest = {
        "version": VERSION,
        "config": config,
        "meta": meta or {},
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(config, {name: float32 array}, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest (expected {12 + mlen} bytes, file has {len(raw)})")
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    payload = raw[12 + mlen :]
    total = sum(e["size"] for e in manifest["arrays"])
    if len(payload) != 4 * total:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest expects {4 * total}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for e in manifest["arrays"]:
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + e["size"]].reshape(e["shape"]).copy()
    return manifest["config"], arrays, manifest["meta"]
