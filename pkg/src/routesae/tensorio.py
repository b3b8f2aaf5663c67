"""Versioned binary envelope for named tensors.

    "RSTE" | version u32 | tag_len u32 | tag | meta_len u32 | meta (JSON, utf-8)
    | n u32 | n x (name_len u32 | name | dtype u8 | ndim u32 | ndim x u64 | data)
    | crc32 u32 of everything before it

Scalars are little-endian IEEE-754 (f32 or f64) or little-endian integers.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"RSTE"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u8", 4: "<u4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class TensorFile:
    tag: str
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def dumps(tf: TensorFile) -> bytes:
    out = bytearray(MAGIC)
    tag = tf.tag.encode("utf-8")
    meta = json.dumps(tf.meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<II", VERSION, len(tag)) + tag
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(tf.tensors))
    for name, arr in tf.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", _CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def loads(buf: bytes, source: str = "<bytes>") -> TensorFile:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a tensor file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: checksum mismatch, file is corrupted")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: tensor file version {version}, this build reads version {VERSION}")
    (tag_len,) = struct.unpack("<I", take(4))
    tag = take(tag_len).decode("utf-8")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = np.dtype(_DTYPES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(n_bytes), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
    return TensorFile(tag, meta, tensors)


def save(tf: TensorFile, path: str | os.PathLike) -> None:
    data = dumps(tf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike, expect_tag: str | None = None) -> TensorFile:
    with open(path, "rb") as fh:
        tf = loads(fh.read(), str(path))
    if expect_tag is not None and tf.tag != expect_tag:
        raise CheckpointError(f"{path}: expected a {expect_tag!r} file, found {tf.tag!r}")
    return tf
