"""Versioned, checksummed weight archives.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TFWA"
    4       2     format version (currently 1)
    6       4     header length H in bytes
    10      H     UTF-8 JSON header: {"config": {...}, "param_count": int,
                  "tensors": [{"name", "shape", "offset", "kind"}, ...]}
    10+H    P     tensor payload, float32 little-endian, row-major, in header order;
                  "offset" counts bytes from the start of the payload
    10+H+P  32    SHA-256 of every preceding byte

``kind`` is ``"param"`` for trainable tensors and ``"buffer"`` for fixed
ones (the sinusoidal table).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import ModelWeights, ShapeMismatch, check_reference_count, count_params, param_shapes

MAGIC = b"TFWA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST_LEN = 32


class ArchiveError(ValueError):
    pass


class VersionMismatch(ArchiveError):
    pass


class ChecksumMismatch(ArchiveError):
    pass


def to_bytes(weights: ModelWeights, version: int = FORMAT_VERSION) -> bytes:
    entries, chunks, offset = [], [], 0
    tensors = [(k, v, "param") for k, v in weights.params.items()]
    tensors += [(k, v, "buffer") for k, v in weights.buffers.items()]
    for name, value, kind in tensors:
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "kind": kind})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": weights.config.to_dict(),
        "param_count": count_params(weights),
        "tensors": entries,
    }, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> ModelWeights:
    if blob[:4] != MAGIC[:len(blob)] or not blob:
        raise ArchiveError("not a weight archive")
    if len(blob) < _PREFIX.size:
        raise ChecksumMismatch("archive is truncated")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"archive version {version}, this reader understands {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if len(blob) < _PREFIX.size + header_len + _DIGEST_LEN or hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("archive is truncated or corrupted")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + header_len])
    payload = memoryview(body)[_PREFIX.size + header_len:]
    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(config.dtype)

    expected = param_shapes(config)
    params, buffers = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * size > len(payload):
            raise ShapeMismatch(f"tensor {entry['name']} runs past the payload")
        value = np.frombuffer(payload[start:start + 4 * size], dtype="<f4").reshape(shape).astype(dtype)
        if entry["kind"] == "param":
            if expected.get(entry["name"]) != shape:
                raise ShapeMismatch(f"tensor {entry['name']} has shape {shape}, "
                                    f"configuration expects {expected.get(entry['name'])}")
            params[entry["name"]] = value
        else:
            buffers[entry["name"]] = value
    missing = set(expected) - set(params)
    if missing:
        raise ShapeMismatch(f"archive lacks tensors {sorted(missing)}")
    weights = ModelWeights(config, {k: params[k] for k in expected}, buffers)
    if header.get("param_count") != count_params(weights):
        raise ShapeMismatch("parameter count in header disagrees with the tensors")
    check_reference_count(weights)
    return weights


def save_weights(weights: ModelWeights, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(weights))
    return path


def load_weights(path: str | os.PathLike) -> ModelWeights:
    return from_bytes(Path(path).read_bytes())


def archive_param_count(path: str | os.PathLike) -> int:
    """Parameter count recorded in an archive header (after full validation)."""
    return count_params(load_weights(path))
