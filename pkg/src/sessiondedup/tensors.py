"""Jagged and deduplicated tensor encodings.

A batch of variable-length ID lists is stored either as a plain keyed
jagged tensor (:class:`KJT`) or, when rows repeat, as an inverse keyed
jagged tensor (:class:`IKJT`) that keeps one copy of each distinct row
and an ``inverse_lookup`` slice mapping batch rows onto the unique rows.
Grouped IKJTs deduplicate several features under one shared
``inverse_lookup``; two batch rows merge only when *every* feature in
the group has identical lists on both rows.

All tensor objects are immutable after construction (their numpy buffers
are marked read-only) and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "JaggedTensor",
    "KJT",
    "IKJT",
    "PartialIKJT",
    "DedupeModel",
    "build_kjt",
    "build_ikjt",
    "build_partial_ikjt",
    "ikjt_to_kjt",
    "jagged_index_select",
    "dedupe_len",
    "dedupe_factor",
    "measured_dedupe_factor",
    "serialize_kjt",
    "serialize_ikjt",
    "slice_stream_bytes",
    "values_stream_bytes",
]

_I64 = np.dtype("<i8")


def _as_id_array(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"ID list must be one-dimensional, got shape {arr.shape}")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class JaggedTensor:
    """A batch of variable-length int64 ID lists in values/offsets form.

    ``offsets`` holds one entry per row: row ``i`` spans
    ``values[offsets[i]:offsets[i+1]]``, and the last row runs to the end
    of ``values``.
    """

    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _freeze(self.values))
        object.__setattr__(self, "offsets", _freeze(self.offsets))
        off = self.offsets
        if off.size:
            if off[0] != 0:
                raise ValueError("offsets[0] must be 0")
            if np.any(np.diff(off) < 0):
                raise ValueError("offsets must be non-decreasing")
            if off[-1] > self.values.size:
                raise ValueError("offset exceeds values length")

    @classmethod
    def from_rows(cls, rows: Sequence) -> "JaggedTensor":
        arrs = [_as_id_array(r) for r in rows]
        lengths = np.array([a.size for a in arrs], dtype=np.int64)
        offsets = np.zeros(len(arrs), dtype=np.int64)
        if len(arrs) > 1:
            np.cumsum(lengths[:-1], out=offsets[1:])
        values = np.concatenate(arrs) if arrs else np.empty(0, dtype=np.int64)
        return cls(values=values, offsets=offsets)

    @property
    def row_count(self) -> int:
        return int(self.offsets.size)

    def row_lengths(self) -> np.ndarray:
        bounds = np.append(self.offsets, self.values.size)
        return np.diff(bounds)

    def row(self, i: int) -> np.ndarray:
        n = self.row_count
        if not 0 <= i < n:
            raise IndexError(f"row {i} out of range for {n} rows")
        start = self.offsets[i]
        end = self.offsets[i + 1] if i + 1 < n else self.values.size
        return self.values[start:end]

    def to_pylists(self) -> list[list[int]]:
        return [self.row(i).tolist() for i in range(self.row_count)]


def jt_equal(a: JaggedTensor, b: JaggedTensor) -> bool:
    return np.array_equal(a.values, b.values) and np.array_equal(a.offsets, b.offsets)


@dataclass(frozen=True, eq=False)
class KJT:
    """Keyed jagged tensor: one JaggedTensor of ``batch_size`` rows per feature key."""

    batch_size: int
    entries: Mapping[str, JaggedTensor]

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "entries", dict(self.entries))
        for key, jt in self.entries.items():
            if jt.row_count != self.batch_size:
                raise ValueError(
                    f"feature {key!r} has {jt.row_count} rows, expected {self.batch_size}"
                )

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(self.entries)


def kjt_equal(a: KJT, b: KJT) -> bool:
    if a.batch_size != b.batch_size or a.keys != b.keys:
        return False
    return all(jt_equal(a.entries[k], b.entries[k]) for k in a.entries)


@dataclass(frozen=True, eq=False)
class IKJT:
    """Deduplicated keyed jagged tensor for one feature group.

    ``inverse_lookup[i]`` is the unique-row ordinal for batch row ``i``;
    every per-feature JaggedTensor has exactly U rows, numbered in
    first-occurrence order. Unique-row ordinals (not offsets positions)
    are used uniformly, so empty unique rows are addressed the same way
    as any other.
    """

    batch_size: int
    group_keys: tuple[str, ...]
    inverse_lookup: np.ndarray
    per_feature: Mapping[str, JaggedTensor]

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_keys", tuple(self.group_keys))
        object.__setattr__(self, "inverse_lookup", _freeze(self.inverse_lookup))
        object.__setattr__(self, "per_feature", dict(self.per_feature))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.inverse_lookup.size != self.batch_size:
            raise ValueError("inverse_lookup must have one entry per batch row")
        if set(self.group_keys) != set(self.per_feature):
            raise ValueError("group_keys and per_feature keys differ")
        u = self.unique_count
        if u > self.batch_size:
            raise ValueError("more unique rows than batch rows")
        for key, jt in self.per_feature.items():
            if jt.row_count != u:
                raise ValueError(
                    f"feature {key!r} has {jt.row_count} dedup rows, expected {u}"
                )
        if self.inverse_lookup.size:
            lo = int(self.inverse_lookup.min())
            hi = int(self.inverse_lookup.max())
            if lo < 0 or hi >= u:
                raise ValueError("inverse_lookup entry out of range")
            if np.unique(self.inverse_lookup).size != u:
                raise ValueError("orphan unique rows: some ordinal never referenced")

    @property
    def unique_count(self) -> int:
        key = self.group_keys[0]
        return self.per_feature[key].row_count


@dataclass(frozen=True, eq=False)
class PartialIKJT:
    """Single-feature encoding that also reuses shifted (partially equal) rows.

    Rows are stored as (offset, length) windows into one shared value
    buffer, so a row that is a shift of an earlier row costs only the
    non-overlapping tail.
    """

    feature_key: str
    values: np.ndarray
    windows: np.ndarray  # shape (B, 2): (offset, length) per row

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _freeze(self.values))
        win = np.ascontiguousarray(self.windows, dtype=np.int64)
        win.setflags(write=False)
        object.__setattr__(self, "windows", win)
        if win.ndim != 2 or win.shape[1] != 2:
            raise ValueError("windows must be a (B, 2) array")
        if win.size and np.any(win[:, 0] + win[:, 1] > self.values.size):
            raise ValueError("window exceeds value buffer")
        if win.size and (np.any(win[:, 0] < 0) or np.any(win[:, 1] < 0)):
            raise ValueError("negative window bound")

    @property
    def row_count(self) -> int:
        return int(self.windows.shape[0])

    def row(self, i: int) -> np.ndarray:
        off, length = self.windows[i]
        return self.values[off : off + length]


def _row_features(row) -> Mapping:
    feats = getattr(row, "features", None)
    if feats is not None:
        return feats
    if isinstance(row, Mapping):
        return row
    raise TypeError(f"cannot extract features from {type(row).__name__}")


def _feature_list(row, key: str) -> np.ndarray:
    # Absent feature keys are treated as empty lists.
    feats = _row_features(row)
    seq = feats.get(key)
    if seq is None:
        return np.empty(0, dtype=np.int64)
    return _as_id_array(seq)


def build_kjt(rows: Sequence, keys: Sequence[str]) -> KJT:
    """Convert a batch of records into a KJT, preserving batch order."""
    if len(rows) == 0:
        raise ValueError("empty batch")
    entries = {
        key: JaggedTensor.from_rows([_feature_list(r, key) for r in rows])
        for key in keys
    }
    return KJT(batch_size=len(rows), entries=entries)


def _pack_group_row(arrs: Sequence[np.ndarray]) -> bytes:
    parts = []
    for arr in arrs:
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.astype(_I64, copy=False).tobytes())
    return b"".join(parts)


def _content_hash(packed: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


def build_ikjt(rows: Sequence, group: Sequence[str]) -> IKJT:
    """Deduplicate a feature group across the whole batch into an IKJT.

    Batch rows i and j share an ``inverse_lookup`` entry iff all features
    in the group have identical lists at i and j. Detection uses a 64-bit
    content hash followed by a full byte comparison on hash match, so
    hash collisions can never merge unequal rows. Unique rows are
    numbered in first-occurrence order.
    """
    if len(rows) == 0:
        raise ValueError("empty batch")
    if len(group) == 0:
        raise ValueError("empty dedup group")
    row_lists = [[_feature_list(r, key) for key in group] for r in rows]
    inverse = np.empty(len(rows), dtype=np.int64)
    buckets: dict[int, list[tuple[int, bytes]]] = {}
    first_rows: list[int] = []
    for i, arrs in enumerate(row_lists):
        packed = _pack_group_row(arrs)
        bucket = buckets.setdefault(_content_hash(packed), [])
        uid = -1
        for cand_uid, cand_packed in bucket:
            if cand_packed == packed:
                uid = cand_uid
                break
        if uid < 0:
            uid = len(first_rows)
            first_rows.append(i)
            bucket.append((uid, packed))
        inverse[i] = uid
    per_feature = {
        key: JaggedTensor.from_rows([row_lists[i][k] for i in first_rows])
        for k, key in enumerate(group)
    }
    return IKJT(
        batch_size=len(rows),
        group_keys=tuple(group),
        inverse_lookup=inverse,
        per_feature=per_feature,
    )


def build_partial_ikjt(rows: Sequence, key: str) -> PartialIKJT:
    """Greedy shift-aware encoding of one feature across a batch.

    For each row list, in batch order: reuse the leftmost contiguous
    window of the buffer equal to the list if one exists; otherwise, if
    the longest proper prefix of the list matches a suffix of the buffer,
    append only the non-overlapping tail; otherwise append the whole
    list.
    """
    if len(rows) == 0:
        raise ValueError("empty batch")
    buf = bytearray()
    windows = np.empty((len(rows), 2), dtype=np.int64)
    item = _I64.itemsize
    for i, row in enumerate(rows):
        arr = _feature_list(row, key)
        needle = arr.astype(_I64, copy=False).tobytes()
        n = arr.size
        if n == 0:
            windows[i] = (0, 0)
            continue
        pos = _find_aligned(buf, needle, item)
        if pos >= 0:
            windows[i] = (pos // item, n)
            continue
        overlap = _suffix_overlap(buf, needle, item, max_len=n - 1)
        start = (len(buf) - overlap * item) // item
        buf.extend(needle[overlap * item :])
        windows[i] = (start, n)
    values = np.frombuffer(bytes(buf), dtype=_I64).astype(np.int64)
    return PartialIKJT(feature_key=key, values=values, windows=windows)


def _find_aligned(buf: bytearray, needle: bytes, item: int) -> int:
    start = 0
    while True:
        pos = buf.find(needle, start)
        if pos < 0:
            return -1
        if pos % item == 0:
            return pos
        start = pos + 1


def _suffix_overlap(buf: bytearray, needle: bytes, item: int, max_len: int) -> int:
    limit = min(max_len, len(buf) // item)
    for k in range(limit, 0, -1):
        if buf[-k * item :] == needle[: k * item]:
            return k
    return 0


def jagged_index_select(jt: JaggedTensor, indices) -> JaggedTensor:
    """Select rows of a jagged tensor without densifying.

    Output row k equals input row ``indices[k]``; the output value buffer
    holds exactly the selected rows' elements.
    """
    idx = np.asarray(indices, dtype=np.int64)
    n = jt.row_count
    if idx.size:
        bad = np.flatnonzero((idx < 0) | (idx >= n))
        if bad.size:
            p = int(bad[0])
            raise IndexError(
                f"index {int(idx[p])} at position {p} out of range for {n} rows"
            )
    lengths = jt.row_lengths()
    starts = jt.offsets
    sel_len = lengths[idx]
    out_offsets = np.zeros(idx.size, dtype=np.int64)
    if idx.size > 1:
        np.cumsum(sel_len[:-1], out=out_offsets[1:])
    total = int(sel_len.sum())
    # Gather: for output element t in row k, source index is
    # starts[idx[k]] + (t - out_offsets[k]).
    gather = np.repeat(starts[idx] - out_offsets, sel_len) + np.arange(
        total, dtype=np.int64
    )
    return JaggedTensor(values=jt.values[gather], offsets=out_offsets)


def ikjt_to_kjt(ikjt: IKJT) -> KJT:
    """Expand an IKJT back to the logically equal KJT."""
    entries = {
        key: jagged_index_select(jt, ikjt.inverse_lookup)
        for key, jt in ikjt.per_feature.items()
    }
    return KJT(batch_size=ikjt.batch_size, entries=entries)


@dataclass(frozen=True)
class DedupeModel:
    """Analytical predictor of per-batch deduplication for one feature.

    ``samples_per_session`` (S) is the average number of samples a
    session contributes, ``batch_size`` (B) the batch size, ``avg_len``
    (l) the feature's average list length, and ``unchanged_prob`` (d) the
    probability the feature's value is identical across adjacent rows of
    the same session.
    """

    samples_per_session: float
    batch_size: int
    avg_len: float
    unchanged_prob: float

    def __post_init__(self) -> None:
        if self.samples_per_session < 1:
            raise ValueError("samples_per_session must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.avg_len <= 0:
            raise ValueError("avg_len must be > 0")
        if not 0.0 <= self.unchanged_prob <= 1.0:
            raise ValueError("unchanged_prob must be in [0, 1]")


def dedupe_len(model: DedupeModel) -> float:
    """Predicted values-slice length after deduplication.

    Evaluates l*B*(1 - (S-1)/S*d) with the division last, so whole-number
    cases come out exact.
    """
    s = model.samples_per_session
    unique_share = s - (s - 1.0) * model.unchanged_prob
    return model.avg_len * model.batch_size * unique_share / s


def dedupe_factor(model: DedupeModel) -> float:
    """Ratio of original to deduplicated values-slice length."""
    return model.avg_len * model.batch_size / dedupe_len(model)


def measured_dedupe_factor(ikjt: IKJT, baseline: KJT) -> dict[str, float]:
    """Observed per-feature dedupe factor of an encoded batch.

    Ratio of the baseline values length to the deduplicated values
    length; features whose values are empty in both encodings report 1.0.
    """
    if ikjt.batch_size != baseline.batch_size:
        raise ValueError("batch size mismatch")
    out: dict[str, float] = {}
    for key in ikjt.group_keys:
        if key not in baseline.entries:
            raise ValueError(f"feature {key!r} missing from baseline KJT")
        base_n = baseline.entries[key].values.size
        dedup_n = ikjt.per_feature[key].values.size
        out[key] = base_n / dedup_n if dedup_n else 1.0
    return out


# Canonical wire format, used for reader->trainer transport and for all
# network byte accounting. Little-endian throughout:
#   u32 key count; per key: u32 byte length + UTF-8 bytes
#   u64 batch size B
#   u8 inverse flag; if 1, B x i64 inverse_lookup (no count: length is B)
#   per key: u64 offsets count + i64 offsets
#   per key: u64 values count + i64 values


def _serialize(keys: Sequence[str], batch_size: int,
               inverse: np.ndarray | None,
               tensors: Mapping[str, JaggedTensor]) -> bytes:
    parts = [struct.pack("<I", len(keys))]
    for key in keys:
        kb = key.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
    parts.append(struct.pack("<Q", batch_size))
    if inverse is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(inverse.astype(_I64, copy=False).tobytes())
    for key in keys:
        off = tensors[key].offsets
        parts.append(struct.pack("<Q", off.size))
        parts.append(off.astype(_I64, copy=False).tobytes())
    for key in keys:
        val = tensors[key].values
        parts.append(struct.pack("<Q", val.size))
        parts.append(val.astype(_I64, copy=False).tobytes())
    return b"".join(parts)


def serialize_kjt(kjt: KJT) -> bytes:
    return _serialize(kjt.keys, kjt.batch_size, None, kjt.entries)


def serialize_ikjt(ikjt: IKJT) -> bytes:
    return _serialize(
        ikjt.group_keys, ikjt.batch_size, ikjt.inverse_lookup, ikjt.per_feature
    )


def slice_stream_bytes(jt: JaggedTensor) -> int:
    """Wire size of one feature's (offsets, values) slices: two
    count-prefixed i64 streams."""
    return 16 + 8 * (jt.offsets.size + jt.values.size)


def values_stream_bytes(jt: JaggedTensor) -> int:
    """Data bytes of the values stream alone (excluding the count prefix)."""
    return 8 * jt.values.size
