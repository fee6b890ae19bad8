"""Columnar log file with row-group stripes and per-column compression.

Layout (all integers little-endian, see docs/file_format.md):

    header:  magic "SESSCOL1" | u32 version | u8 codec | u8 level |
             u16 reserved | schema: u32 key count, per key u32 len + utf8
    stripe:  u32 row_count | streams in fixed order
             (session_id, timestamp, label, then per key: offsets
             deltas a.k.a. row lengths, then values), each stream
             u32 raw_len | u32 comp_len | comp bytes
    footer:  u32 stripe count | per stripe u64 file offset + u32 rows |
             u64 footer offset | magic

Streams are varint-packed int64 before compression. Files are
write-once; any number of readers may scan one concurrently.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .datagen import ImpressionRecord
from .varint import decode_varints, encode_varints

__all__ = [
    "StorageError",
    "ColumnarFile",
    "StripeInfo",
    "ScanBatch",
    "CompressionReport",
    "write_table",
    "open_table",
    "scan",
    "compression_report",
    "stream_sizes",
    "DEFAULT_STRIPE_ROWS",
]

MAGIC = b"SESSCOL1"
VERSION = 1
CODEC_ZLIB = 1
DEFAULT_STRIPE_ROWS = 4096
DEFAULT_LEVEL = 6


class StorageError(Exception):
    pass


@dataclass(frozen=True)
class StripeInfo:
    offset: int  # file offset of the stripe's first byte
    row_count: int
    byte_size: int  # file bytes spanned by the stripe


@dataclass(frozen=True)
class ColumnarFile:
    """Handle over a written file: header fields plus the stripe index."""

    path: Path
    version: int
    codec: int
    level: int
    feature_keys: tuple[str, ...]
    stripes: tuple[StripeInfo, ...]

    @property
    def row_count(self) -> int:
        return sum(s.row_count for s in self.stripes)


@dataclass
class ScanBatch:
    records: list[ImpressionRecord]
    bytes_read: int  # compressed file bytes consumed for this batch


@dataclass(frozen=True)
class CompressionReport:
    raw_bytes_a: int
    compressed_bytes_a: int
    raw_bytes_b: int
    compressed_bytes_b: int

    @property
    def ratio_a(self) -> float:
        return self.raw_bytes_a / self.compressed_bytes_a if self.compressed_bytes_a else 1.0

    @property
    def ratio_b(self) -> float:
        return self.raw_bytes_b / self.compressed_bytes_b if self.compressed_bytes_b else 1.0

    @property
    def relative_ratio(self) -> float:
        """How much better file B compresses than file A."""
        return self.ratio_b / self.ratio_a


def _pack_stream(arr: np.ndarray, level: int) -> bytes:
    raw = encode_varints(arr)
    comp = zlib.compress(raw, level)
    return struct.pack("<II", len(raw), len(comp)) + comp


def _cluster_order(records: list[ImpressionRecord]) -> np.ndarray:
    sids = np.fromiter((r.session_id for r in records), dtype=np.int64)
    ts = np.fromiter((r.timestamp for r in records), dtype=np.int64)
    return np.lexsort((ts, sids))  # stable: session blocks, time within


def write_table(
    records: list[ImpressionRecord],
    path: str | Path,
    stripe_rows: int = DEFAULT_STRIPE_ROWS,
    clustering: str = "none",
    level: int = DEFAULT_LEVEL,
) -> ColumnarFile:
    """Write records to a columnar file and return its handle.

    ``by_session`` clustering stably sorts rows by (session_id,
    timestamp) first; ``none`` preserves input order.
    """
    if stripe_rows < 1:
        raise StorageError("stripe_rows must be >= 1")
    if clustering not in ("none", "by_session"):
        raise StorageError(f"unknown clustering mode {clustering!r}")
    if not records:
        raise StorageError("refusing to write an empty table")
    keys = tuple(records[0].features.keys())
    for i, rec in enumerate(records):
        if tuple(rec.features.keys()) != keys:
            raise StorageError(f"record {i} feature keys differ from schema")
    if clustering == "by_session":
        records = [records[i] for i in _cluster_order(records)]

    path = Path(path)
    stripes: list[StripeInfo] = []
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<IBBH", VERSION, CODEC_ZLIB, level, 0))
        out.write(struct.pack("<I", len(keys)))
        for key in keys:
            kb = key.encode("utf-8")
            out.write(struct.pack("<I", len(kb)))
            out.write(kb)
        for start in range(0, len(records), stripe_rows):
            chunk = records[start : start + stripe_rows]
            offset = out.tell()
            try:
                blob = _encode_stripe(chunk, keys, level)
            except Exception as exc:  # pragma: no cover - defensive
                raise StorageError(f"stripe {len(stripes)}: write failed: {exc}") from exc
            out.write(blob)
            stripes.append(
                StripeInfo(offset=offset, row_count=len(chunk), byte_size=len(blob))
            )
        footer_offset = out.tell()
        out.write(struct.pack("<I", len(stripes)))
        for s in stripes:
            out.write(struct.pack("<QI", s.offset, s.row_count))
        out.write(struct.pack("<Q", footer_offset))
        out.write(MAGIC)
    return ColumnarFile(
        path=path,
        version=VERSION,
        codec=CODEC_ZLIB,
        level=level,
        feature_keys=keys,
        stripes=tuple(stripes),
    )


def _encode_stripe(
    chunk: list[ImpressionRecord], keys: tuple[str, ...], level: int
) -> bytes:
    parts = [struct.pack("<I", len(chunk))]
    sids = np.fromiter((r.session_id for r in chunk), dtype=np.int64)
    ts = np.fromiter((r.timestamp for r in chunk), dtype=np.int64)
    labels = np.fromiter((r.label for r in chunk), dtype=np.int64)
    parts.append(_pack_stream(sids, level))
    parts.append(_pack_stream(ts, level))
    parts.append(_pack_stream(labels, level))
    for key in keys:
        cols = [r.features[key] for r in chunk]
        lengths = np.fromiter((c.size for c in cols), dtype=np.int64, count=len(cols))
        values = (
            np.concatenate(cols) if lengths.sum() else np.empty(0, dtype=np.int64)
        )
        parts.append(_pack_stream(lengths, level))
        parts.append(_pack_stream(values, level))
    return b"".join(parts)


def open_table(path: str | Path) -> ColumnarFile:
    path = Path(path)
    size = path.stat().st_size
    if size < 16 + len(MAGIC) * 2:
        raise StorageError(f"{path}: too small to be a columnar file")
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise StorageError(f"{path}: bad magic")
        version, codec, level, _ = struct.unpack("<IBBH", f.read(8))
        if version != VERSION:
            raise StorageError(f"{path}: unsupported version {version}")
        if codec != CODEC_ZLIB:
            raise StorageError(f"{path}: unknown codec tag {codec}")
        (n_keys,) = struct.unpack("<I", f.read(4))
        keys = []
        for _ in range(n_keys):
            (klen,) = struct.unpack("<I", f.read(4))
            keys.append(f.read(klen).decode("utf-8"))
        f.seek(size - 16)
        footer_offset, trailer = struct.unpack("<Q8s", f.read(16))
        if trailer != MAGIC:
            raise StorageError(f"{path}: bad trailer magic")
        f.seek(footer_offset)
        (n_stripes,) = struct.unpack("<I", f.read(4))
        stripes = []
        prev_end = 0
        for i in range(n_stripes):
            offset, rows = struct.unpack("<QI", f.read(12))
            if offset <= prev_end:
                raise StorageError(f"{path}: stripe {i} offset not increasing")
            prev_end = offset
            stripes.append((offset, rows))
    infos = []
    for i, (offset, rows) in enumerate(stripes):
        end = stripes[i + 1][0] if i + 1 < len(stripes) else footer_offset
        infos.append(StripeInfo(offset=offset, row_count=rows, byte_size=end - offset))
    return ColumnarFile(
        path=path,
        version=version,
        codec=codec,
        level=level,
        feature_keys=tuple(keys),
        stripes=tuple(infos),
    )


def _read_stream(buf: memoryview, pos: int, ordinal: int, count: int | None):
    if pos + 8 > len(buf):
        raise StorageError(f"stripe {ordinal}: truncated stream header")
    raw_len, comp_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if pos + comp_len > len(buf):
        raise StorageError(f"stripe {ordinal}: truncated stream body")
    try:
        raw = zlib.decompress(bytes(buf[pos : pos + comp_len]))
    except zlib.error as exc:
        raise StorageError(f"stripe {ordinal}: corrupt stream: {exc}") from exc
    if len(raw) != raw_len:
        raise StorageError(
            f"stripe {ordinal}: stream length {len(raw)} != recorded {raw_len}"
        )
    try:
        arr = decode_varints(raw, count)
    except ValueError as exc:
        raise StorageError(f"stripe {ordinal}: corrupt varints: {exc}") from exc
    return arr, pos + comp_len, raw_len, comp_len


def _decode_stripe(
    file: ColumnarFile, ordinal: int, blob: bytes
) -> list[ImpressionRecord]:
    buf = memoryview(blob)
    if len(buf) < 4:
        raise StorageError(f"stripe {ordinal}: truncated header")
    (rows,) = struct.unpack_from("<I", buf, 0)
    if rows != file.stripes[ordinal].row_count:
        raise StorageError(
            f"stripe {ordinal}: row count {rows} != index "
            f"{file.stripes[ordinal].row_count}"
        )
    pos = 4
    sids, pos, _, _ = _read_stream(buf, pos, ordinal, rows)
    ts, pos, _, _ = _read_stream(buf, pos, ordinal, rows)
    labels, pos, _, _ = _read_stream(buf, pos, ordinal, rows)
    columns: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for key in file.feature_keys:
        lengths, pos, _, _ = _read_stream(buf, pos, ordinal, rows)
        values, pos, _, _ = _read_stream(buf, pos, ordinal, int(lengths.sum()))
        bounds = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(lengths, out=bounds[1:])
        values.setflags(write=False)
        columns[key] = (values, bounds)
    out = []
    for i in range(rows):
        feats = {
            key: vals[bounds[i] : bounds[i + 1]]
            for key, (vals, bounds) in columns.items()
        }
        out.append(
            ImpressionRecord(
                session_id=int(sids[i]),
                timestamp=int(ts[i]),
                features=feats,
                label=int(labels[i]),
            )
        )
    return out


def read_stripe(file: ColumnarFile, ordinal: int) -> list[ImpressionRecord]:
    if not 0 <= ordinal < len(file.stripes):
        raise StorageError(f"stripe {ordinal} out of range")
    info = file.stripes[ordinal]
    with open(file.path, "rb") as f:
        f.seek(info.offset)
        blob = f.read(info.byte_size)
    if len(blob) != info.byte_size:
        raise StorageError(f"stripe {ordinal}: short read")
    return _decode_stripe(file, ordinal, blob)


def scan(file: ColumnarFile, batch_size: int) -> Iterator[ScanBatch]:
    """Yield record batches in file order.

    The final batch may be short. ``bytes_read`` charges each stripe's
    compressed size to the batch that forced its decode.
    """
    if batch_size < 1:
        raise StorageError("batch_size must be >= 1")
    pending: list[ImpressionRecord] = []
    pending_bytes = 0
    for ordinal, info in enumerate(file.stripes):
        pending.extend(read_stripe(file, ordinal))
        pending_bytes += info.byte_size
        while len(pending) >= batch_size:
            batch, pending = pending[:batch_size], pending[batch_size:]
            yield ScanBatch(records=batch, bytes_read=pending_bytes)
            pending_bytes = 0
    if pending:
        yield ScanBatch(records=pending, bytes_read=pending_bytes)


def stream_sizes(file: ColumnarFile) -> tuple[int, int]:
    """Total (raw, compressed) stream bytes across all stripes."""
    raw_total = 0
    comp_total = 0
    with open(file.path, "rb") as f:
        for ordinal, info in enumerate(file.stripes):
            f.seek(info.offset)
            blob = f.read(info.byte_size)
            buf = memoryview(blob)
            pos = 4
            n_streams = 3 + 2 * len(file.feature_keys)
            for _ in range(n_streams):
                if pos + 8 > len(buf):
                    raise StorageError(f"stripe {ordinal}: truncated stream header")
                raw_len, comp_len = struct.unpack_from("<II", buf, pos)
                raw_total += raw_len
                comp_total += comp_len
                pos += 8 + comp_len
    return raw_total, comp_total


def compression_report(file_a: ColumnarFile, file_b: ColumnarFile) -> CompressionReport:
    """Raw and compressed stream sizes of two files, plus the ratio of
    file B's compression ratio to file A's."""
    raw_a, comp_a = stream_sizes(file_a)
    raw_b, comp_b = stream_sizes(file_b)
    return CompressionReport(
        raw_bytes_a=raw_a,
        compressed_bytes_a=comp_a,
        raw_bytes_b=raw_b,
        compressed_bytes_b=comp_b,
    )
