"""FEAT binary blocks and the JSON dataset manifest.

A FEAT block is ``b"FEAT"``, then little-endian u32 version, rows, cols,
then ``rows * cols`` little-endian reals in row-major order. Version 1
stores float32 (embedding files); version 2 stores float64 and is used
inside checkpoints so trained parameters survive a save/load unchanged.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FEAT"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FeatFormatError(ValueError):
    pass


def encode_feat(array, version: int = 1) -> bytes:
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise FeatFormatError(f"FEAT blocks hold matrices, got shape {a.shape}")
    if version not in _DTYPES:
        raise FeatFormatError(f"unsupported FEAT version {version}")
    rows, cols = a.shape
    return _HEADER.pack(MAGIC, version, rows, cols) + np.ascontiguousarray(a, dtype=_DTYPES[version]).tobytes()


def decode_feat(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FeatFormatError("truncated FEAT header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatFormatError(f"bad magic {magic!r}")
    if version not in _DTYPES:
        raise FeatFormatError(f"unsupported FEAT version {version}")
    dtype = _DTYPES[version]
    expected = _HEADER.size + rows * cols * dtype.itemsize
    if len(blob) != expected:
        raise FeatFormatError(f"FEAT payload is {len(blob)} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_feat(path, array, version: int = 1) -> None:
    Path(path).write_bytes(encode_feat(array, version))


def read_feat(path) -> np.ndarray:
    return decode_feat(Path(path).read_bytes())


def write_manifest(path, items: list[dict]) -> None:
    Path(path).write_text(json.dumps({"items": items}, indent=2) + "\n")


def read_manifest(path) -> list[dict]:
    """Items with ``caption_feat``/``frame_feat`` resolved against the manifest directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    items = doc.get("items")
    if not isinstance(items, list):
        raise FeatFormatError(f"{path}: manifest needs an 'items' list")
    resolved = []
    for item in items:
        missing = {"id", "caption_feat", "frame_feat"} - set(item)
        if missing:
            raise FeatFormatError(f"{path}: manifest item lacks {sorted(missing)}")
        resolved.append(
            {
                "id": str(item["id"]),
                "caption_feat": path.parent / item["caption_feat"],
                "frame_feat": path.parent / item["frame_feat"],
            }
        )
    return resolved
