"""Versioned binary model container and atomic file writes.

Layout::

    b"ECHOLAB\\0"  uint32 format version  uint32 header length
    header (UTF-8 JSON, sorted keys)
    tensors (little-endian float32, in header order)

The header lists ``tensors`` as ``[{"name", "shape"}]``; everything else
(config, class list, ontology version, logs) is free-form JSON.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"ECHOLAB\0"
FORMAT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack(header: dict, tensors: dict) -> bytes:
    """Serialize ``header`` and an ordered ``{name: array}`` mapping."""
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False,
                        separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        if not np.isfinite(a).all():
            raise ValidationError(f"tensor {name!r} has non-finite values")
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def unpack(data: bytes) -> tuple:
    """Inverse of :func:`pack`: ``(header, {name: float32 array})``."""
    if data[:len(MAGIC)] != MAGIC:
        raise ValidationError("not an echolab model file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {version}")
    off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        tensors[spec["name"]] = arr.astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise ValidationError("trailing bytes after last tensor")
    return header, tensors


def save(path, header: dict, tensors: dict) -> None:
    atomic_write_bytes(path, pack(header, tensors))


def load(path) -> tuple:
    with open(path, "rb") as fh:
        return unpack(fh.read())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if head[:len(MAGIC)] != MAGIC:
            raise ValidationError(f"{path}: not an echolab model file")
        version, hlen = struct.unpack_from("<II", head, len(MAGIC))
        header = json.loads(fh.read(hlen).decode("utf-8"))
    header["format_version"] = version
    return header


def describe(path) -> str:
    return json.dumps(read_header(path), indent=2, sort_keys=True, ensure_ascii=False)
