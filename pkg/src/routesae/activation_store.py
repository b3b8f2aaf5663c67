"""Binary multi-layer activation shards and per-layer normalization.

Layout (all little-endian)::

    "RSAE" | version u32 | d u32 | L u32 | L x u32 layer ids | n_tokens u64
    | flags u32 | tag_len u32 | tag utf-8 | [L x f32 norm scales]
    then n_tokens records of
    sequence_id u64 | position u32 | token_id u32 (0xFFFFFFFF = none) | L*d x f32

flags bit 0: records carry token ids; bit 1: norm scales are present.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateDataError,
    DimensionMismatchError,
    ShardCorruptionError,
    ShardFormatError,
)

MAGIC = b"RSAE"
FORMAT_VERSION = 1
NO_TOKEN = 0xFFFFFFFF
FLAG_TOKEN_IDS = 1
FLAG_NORM_SCALES = 2
DEFAULT_CALIBRATION_TOKENS = 100_000


@dataclass(frozen=True)
class ShardHeader:
    d: int
    layer_ids: tuple[int, ...]
    n_tokens: int = 0
    has_token_ids: bool = False
    source_tag: str = ""
    norm_scales: tuple[float, ...] | None = None
    format_version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        object.__setattr__(self, "layer_ids", tuple(int(i) for i in self.layer_ids))
        if self.d < 1:
            raise ShardFormatError(f"d must be >= 1, got {self.d}")
        if len(self.layer_ids) < 1:
            raise ShardFormatError("layer_ids must be non-empty")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ShardFormatError(f"layer_ids must be strictly increasing: {self.layer_ids}")
        if self.norm_scales is not None:
            scales = tuple(float(s) for s in self.norm_scales)
            if len(scales) != self.L or not all(s > 0 for s in scales):
                raise ShardFormatError("norm_scales must have length L and be positive")
            object.__setattr__(self, "norm_scales", scales)

    @property
    def L(self) -> int:
        return len(self.layer_ids)

    @property
    def flags(self) -> int:
        flags = FLAG_TOKEN_IDS if self.has_token_ids else 0
        if self.norm_scales is not None:
            flags |= FLAG_NORM_SCALES
        return flags

    @property
    def record_dtype(self) -> np.dtype:
        return record_dtype(self.L, self.d)

    @property
    def record_size(self) -> int:
        return self.record_dtype.itemsize

    def to_bytes(self) -> bytes:
        tag = self.source_tag.encode("utf-8")
        parts = [
            self.magic,
            struct.pack("<III", self.format_version, self.d, self.L),
            struct.pack(f"<{self.L}I", *self.layer_ids),
            struct.pack("<QII", self.n_tokens, self.flags, len(tag)),
            tag,
        ]
        if self.norm_scales is not None:
            parts.append(np.asarray(self.norm_scales, dtype="<f4").tobytes())
        return b"".join(parts)

    @property
    def header_size(self) -> int:
        return len(self.to_bytes())


def record_dtype(L: int, d: int) -> np.dtype:
    return np.dtype(
        [
            ("sequence_id", "<u8"),
            ("position", "<u4"),
            ("token_id", "<u4"),
            ("x", "<f4", (L, d)),
        ]
    )


@dataclass
class ActivationRecord:
    """One token: its metadata and the (L, d) stack of residual-stream vectors."""

    x_by_layer: np.ndarray
    sequence_id: int = 0
    position: int = 0
    token_id: int | None = None


@dataclass
class RecordBatch:
    """Columnar view of consecutive records; ``token_id`` is -1 where absent."""

    x: np.ndarray  # (n, L, d)
    sequence_id: np.ndarray
    position: np.ndarray
    token_id: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def records(self) -> Iterator[ActivationRecord]:
        for i in range(len(self)):
            tok = int(self.token_id[i])
            yield ActivationRecord(
                x_by_layer=self.x[i],
                sequence_id=int(self.sequence_id[i]),
                position=int(self.position[i]),
                token_id=None if tok < 0 else tok,
            )

    @classmethod
    def from_records(cls, records: Sequence[ActivationRecord]) -> "RecordBatch":
        return cls(
            x=np.stack([np.asarray(r.x_by_layer) for r in records]),
            sequence_id=np.array([r.sequence_id for r in records], dtype=np.int64),
            position=np.array([r.position for r in records], dtype=np.int64),
            token_id=np.array(
                [-1 if r.token_id is None else r.token_id for r in records], dtype=np.int64
            ),
        )

    @classmethod
    def concat(cls, batches: Sequence["RecordBatch"]) -> "RecordBatch":
        return cls(
            x=np.concatenate([b.x for b in batches]),
            sequence_id=np.concatenate([b.sequence_id for b in batches]),
            position=np.concatenate([b.position for b in batches]),
            token_id=np.concatenate([b.token_id for b in batches]),
        )


def _batch_to_structured(batch: RecordBatch, header: ShardHeader, first_index: int) -> np.ndarray:
    x = np.asarray(batch.x)
    if x.ndim != 3 or x.shape[1:] != (header.L, header.d):
        bad = first_index
        raise DimensionMismatchError(
            f"expected x_by_layer of shape ({header.L}, {header.d}), got {x.shape[1:]}", bad
        )
    finite = np.isfinite(x).all(axis=(1, 2))
    if not finite.all():
        raise DimensionMismatchError("non-finite activation", first_index + int(np.argmin(finite)))
    tokens = np.asarray(batch.token_id, dtype=np.int64)
    if header.has_token_ids:
        missing = tokens < 0
        if missing.any():
            raise DimensionMismatchError(
                "header declares token ids but record has none",
                first_index + int(np.argmax(missing)),
            )
    out = np.empty(len(x), dtype=header.record_dtype)
    out["sequence_id"] = batch.sequence_id
    out["position"] = batch.position
    out["token_id"] = np.where(tokens < 0, NO_TOKEN, tokens) if header.has_token_ids else NO_TOKEN
    out["x"] = x
    return out


def _as_batches(records) -> Iterator[RecordBatch]:
    """Accepts a RecordBatch, or an iterable mixing ActivationRecords and RecordBatches."""
    if isinstance(records, RecordBatch):
        yield records
        return
    pending: list[ActivationRecord] = []
    for item in records:
        if isinstance(item, RecordBatch):
            if pending:
                yield RecordBatch.from_records(pending)
                pending = []
            yield item
        else:
            pending.append(item)
            if len(pending) >= 4096:
                yield RecordBatch.from_records(pending)
                pending = []
    if pending:
        yield RecordBatch.from_records(pending)


def write_shard(header: ShardHeader, records, destination: str | os.PathLike) -> int:
    """Write ``records`` after ``header``; the stored n_tokens is the actual count.

    Returns the number of bytes written.
    """
    destination = Path(destination)
    count = 0
    try:
        with open(destination, "wb") as fh:
            fh.write(header.to_bytes())
            for batch in _as_batches(records):
                if len(batch) == 0:
                    continue
                fh.write(_batch_to_structured(batch, header, count).tobytes())
                count += len(batch)
            final = replace(header, n_tokens=count)
            fh.seek(0)
            fh.write(final.to_bytes())
    except OSError as exc:
        raise OSError(f"failed writing shard {destination}: {exc}") from exc
    return final.header_size + count * header.record_size


def _read_header(fh, path) -> ShardHeader:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise ShardCorruptionError(f"{path}: truncated header", fh.tell())
        return buf

    magic = fh.read(4)
    if magic != MAGIC:
        raise ShardFormatError(f"{path}: bad magic {magic!r}")
    version, d, L = struct.unpack("<III", take(12))
    if version != FORMAT_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard version {version} (expected {FORMAT_VERSION})")
    layer_ids = struct.unpack(f"<{L}I", take(4 * L))
    n_tokens, flags, tag_len = struct.unpack("<QII", take(16))
    tag = take(tag_len).decode("utf-8")
    scales = None
    if flags & FLAG_NORM_SCALES:
        scales = tuple(float(s) for s in np.frombuffer(take(4 * L), dtype="<f4"))
    return ShardHeader(
        d=d,
        layer_ids=layer_ids,
        n_tokens=n_tokens,
        has_token_ids=bool(flags & FLAG_TOKEN_IDS),
        source_tag=tag,
        norm_scales=scales,
        format_version=version,
    )


def read_header(source: str | os.PathLike) -> ShardHeader:
    with open(source, "rb") as fh:
        return _read_header(fh, source)


def _struct_to_batch(raw: np.ndarray) -> RecordBatch:
    tok = raw["token_id"].astype(np.int64)
    tok[tok == NO_TOKEN] = -1
    return RecordBatch(
        x=raw["x"].copy(),
        sequence_id=raw["sequence_id"].astype(np.int64),
        position=raw["position"].astype(np.int64),
        token_id=tok,
    )


def read_shard(source: str | os.PathLike, batch_size: int = 64) -> tuple[ShardHeader, Iterator[RecordBatch]]:
    """Open a shard; returns its header and an iterator over batches of <= batch_size.

    The payload length is validated up front, so a truncated file fails before
    any record is yielded.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    with open(source, "rb") as fh:
        header = _read_header(fh, source)
        start = fh.tell()
    size = os.path.getsize(source)
    expected = start + header.n_tokens * header.record_size
    if size < expected:
        complete = (size - start) // header.record_size
        raise ShardCorruptionError(
            f"{source}: truncated payload, {complete} of {header.n_tokens} records complete",
            start + complete * header.record_size,
        )

    def batches() -> Iterator[RecordBatch]:
        dtype = header.record_dtype
        with open(source, "rb") as fh:
            fh.seek(start)
            remaining = header.n_tokens
            while remaining:
                n = min(batch_size, remaining)
                raw = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
                yield _struct_to_batch(raw)
                remaining -= n

    return header, batches()


def load_shard(source: str | os.PathLike) -> tuple[ShardHeader, RecordBatch]:
    header, it = read_shard(source, batch_size=1 << 16)
    batches = list(it)
    if not batches:
        empty = RecordBatch(
            x=np.zeros((0, header.L, header.d), dtype=np.float32),
            sequence_id=np.zeros(0, dtype=np.int64),
            position=np.zeros(0, dtype=np.int64),
            token_id=np.zeros(0, dtype=np.int64),
        )
        return header, empty
    return header, RecordBatch.concat(batches)


@dataclass(frozen=True)
class NormalizationStats:
    per_layer_scale: np.ndarray
    target_norm: float
    sample_count: int
    layer_ids: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "per_layer_scale": [float(s) for s in self.per_layer_scale],
            "target_norm": self.target_norm,
            "sample_count": self.sample_count,
            "layer_ids": list(self.layer_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(
            per_layer_scale=np.asarray(data["per_layer_scale"], dtype=np.float64),
            target_norm=float(data["target_norm"]),
            sample_count=int(data["sample_count"]),
            layer_ids=tuple(data.get("layer_ids", ())),
        )

    @classmethod
    def identity(cls, L: int, d: int) -> "NormalizationStats":
        return cls(np.ones(L), float(np.sqrt(d)), 0)


def compute_norm_stats(
    shards: Sequence[str | os.PathLike], max_tokens: int = DEFAULT_CALIBRATION_TOKENS
) -> NormalizationStats:
    """Per-layer scale s_i = sqrt(d) / mean ||x_i|| over the first max_tokens records."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if not shards:
        raise ValueError("no shards given")
    ref = None
    norm_sum = None
    seen = 0
    for path in shards:
        header, it = read_shard(path, batch_size=8192)
        if ref is None:
            ref = header
            norm_sum = np.zeros(header.L, dtype=np.float64)
        elif (header.d, header.layer_ids) != (ref.d, ref.layer_ids):
            raise DimensionMismatchError(f"{path}: shard shape differs from {shards[0]}")
        for batch in it:
            take = min(len(batch), max_tokens - seen)
            x = batch.x[:take].astype(np.float64)
            norm_sum += np.linalg.norm(x, axis=2).sum(axis=0)
            seen += take
            if seen >= max_tokens:
                break
        if seen >= max_tokens:
            break
    if seen == 0:
        raise DegenerateDataError("no records available for normalization statistics")
    mean_norm = norm_sum / seen
    if np.any(mean_norm == 0):
        bad = [ref.layer_ids[i] for i in np.flatnonzero(mean_norm == 0)]
        raise DegenerateDataError(f"layers {bad} have zero mean norm")
    target = float(np.sqrt(ref.d))
    return NormalizationStats(target / mean_norm, target, seen, ref.layer_ids)


def apply_normalization(record, stats: NormalizationStats):
    """Scale each layer by its factor. Accepts an ActivationRecord, a RecordBatch or an array."""
    scales = np.asarray(stats.per_layer_scale, dtype=np.float64)
    if isinstance(record, ActivationRecord):
        x = np.asarray(record.x_by_layer)
        _check_scales(scales, x.shape[0])
        return replace(record, x_by_layer=x * scales[:, None])
    if isinstance(record, RecordBatch):
        _check_scales(scales, record.x.shape[1])
        return replace(record, x=record.x * scales[None, :, None])
    x = np.asarray(record)
    _check_scales(scales, x.shape[-2])
    return x * scales[:, None]


def _check_scales(scales: np.ndarray, L: int) -> None:
    if scales.shape[0] != L:
        raise DimensionMismatchError(f"normalization has {scales.shape[0]} scales for {L} layers")
