"""``.rlkw`` weight container.

Layout (little-endian)::

    b"RLKW" | u32 version | u64 header length | JSON header | f32 payload | u32 CRC32(payload)

The header is a JSON object ``{"tensors": [...], "graph": {...} | null}``
where each tensor entry is ``{name, shape, dtype: "f32", byte_offset}``
relative to the payload start, in payload order.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import LayerGraph, ModelWeights

MAGIC = b"RLKW"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")


class WeightFileError(Exception):
    """Base class for container decoding failures."""


class FormatError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


def save(graph: Optional[LayerGraph], weights: ModelWeights, path) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in weights.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(dict(name=name, shape=list(data.shape), dtype="f32", byte_offset=offset))
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(dict(tensors=entries, graph=graph.to_dict() if graph else None),
                        separators=(",", ":")).encode()
    payload = b"".join(chunks)
    blob = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload + _CRC.pack(zlib.crc32(payload))
    Path(path).write_bytes(blob)


def load(path):
    """Read a container; returns ``(graph or None, weights)`` or raises a ``WeightFileError``."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise TruncatedError(f"{path}: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported container version {version} (expected {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise TruncatedError(f"{path}: header runs past end of file")
    try:
        header = json.loads(blob[start:start + hlen])
    except ValueError as e:
        raise FormatError(f"{path}: unreadable header: {e}") from None
    body = start + hlen
    tensors = header.get("tensors", [])
    size = sum(int(np.prod(t["shape"], dtype=np.int64)) * 4 for t in tensors)
    if len(blob) < body + size + _CRC.size:
        raise TruncatedError(f"{path}: payload truncated ({len(blob) - body} of {size + _CRC.size} bytes)")
    if len(blob) > body + size + _CRC.size:
        raise FormatError(f"{path}: trailing bytes after checksum")
    payload = blob[body:body + size]
    (crc,) = _CRC.unpack_from(blob, body + size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    weights: ModelWeights = {}
    for t in tensors:
        if t.get("dtype") != "f32":
            raise FormatError(f"{path}: tensor {t['name']} has unsupported dtype {t.get('dtype')}")
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=t["byte_offset"])
        weights[t["name"]] = arr.astype(np.float32).reshape(t["shape"])
    graph = LayerGraph.from_dict(header["graph"]) if header.get("graph") else None
    return graph, weights
