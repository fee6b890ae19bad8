"""Reader pipeline: fill raw rows, convert to tensors, process transforms.

A dataloader spec names the feature keys, the dedup groups (each group
becomes one IKJT whose features share an inverse_lookup slice), the
transforms to apply, and the batch size. Features outside every group
stay plain jagged tensors.

Transforms are restricted to pure element-wise ID maps. That restriction
is what makes running them on deduplicated values sound: a row-dependent
transform would need the expanded batch and is rejected by construction
here (there is simply no such transform kind).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import json
import numpy as np

from .storage import ColumnarFile, ScanBatch, scan
from .tensors import (
    IKJT,
    KJT,
    JaggedTensor,
    build_ikjt,
    build_kjt,
    serialize_ikjt,
    serialize_kjt,
)

__all__ = [
    "Transform",
    "DataloaderSpec",
    "StageTimings",
    "ReaderBatch",
    "fill",
    "convert",
    "process",
    "emit",
    "read_batches",
    "apply_transform",
    "load_dataloader_spec",
    "save_dataloader_spec",
]

_U64 = np.uint64


@dataclass(frozen=True)
class Transform:
    """Element-wise ID map applied to one feature's values slice."""

    op: str  # "identity" | "mod_hash" | "clamp"
    key: str
    param: int | None = None

    def __post_init__(self) -> None:
        if self.op not in ("identity", "mod_hash", "clamp"):
            raise ValueError(f"unknown transform op {self.op!r}")
        if self.op in ("mod_hash", "clamp") and (self.param is None or self.param < 1):
            raise ValueError(f"{self.op} needs a positive param")


def _splitmix64_vec(x: np.ndarray) -> np.ndarray:
    z = x.astype(_U64) + _U64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def apply_transform(values: np.ndarray, t: Transform) -> np.ndarray:
    if t.op == "identity":
        return values
    if t.op == "mod_hash":
        return (_splitmix64_vec(values) % _U64(t.param)).astype(np.int64)
    return np.clip(values, 0, t.param)


@dataclass(frozen=True)
class DataloaderSpec:
    keys: tuple[str, ...]
    dedup_sparse_features: tuple[tuple[str, ...], ...]
    transforms: tuple[Transform, ...] = ()
    batch_size: int = 4096

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(
            self,
            "dedup_sparse_features",
            tuple(tuple(g) for g in self.dedup_sparse_features),
        )
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        seen: set[str] = set()
        for group in self.dedup_sparse_features:
            if not group:
                raise ValueError("empty dedup group")
            for key in group:
                if key in seen:
                    raise ValueError(f"feature {key!r} in more than one dedup group")
                if key not in self.keys:
                    raise ValueError(f"grouped feature {key!r} not in keys")
                seen.add(key)
        for t in self.transforms:
            if t.key not in self.keys:
                raise ValueError(f"transform targets unknown key {t.key!r}")

    @property
    def plain_keys(self) -> tuple[str, ...]:
        grouped = {k for g in self.dedup_sparse_features for k in g}
        return tuple(k for k in self.keys if k not in grouped)

    def without_dedup(self) -> "DataloaderSpec":
        """The baseline spec: same keys and transforms, no dedup groups."""
        return replace(self, dedup_sparse_features=())


@dataclass
class StageTimings:
    fill_s: float = 0.0
    convert_s: float = 0.0
    process_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.fill_s + self.convert_s + self.process_s


@dataclass
class ReaderBatch:
    batch_size: int
    kjts: dict[str, JaggedTensor]
    ikjts: list[IKJT]
    labels: np.ndarray
    stage_timings: StageTimings = field(default_factory=StageTimings)
    bytes_in: int = 0
    bytes_out: int = 0

    def all_keys(self) -> tuple[str, ...]:
        keys = list(self.kjts)
        for ikjt in self.ikjts:
            keys.extend(ikjt.group_keys)
        return tuple(keys)


def fill(stream: Iterator[ScanBatch]) -> tuple[ScanBatch | None, float]:
    """Pull the next raw row batch; None signals an exhausted stream."""
    t0 = time.perf_counter()
    nxt = next(stream, None)
    return nxt, time.perf_counter() - t0


def convert(rows, spec: DataloaderSpec) -> ReaderBatch:
    """Turn raw rows into tensors: one IKJT per dedup group, one plain
    jagged tensor per remaining key."""
    if not rows:
        raise ValueError("convert needs a non-empty row batch")
    t0 = time.perf_counter()
    ikjts = [build_ikjt(rows, group) for group in spec.dedup_sparse_features]
    plain = spec.plain_keys
    kjts = dict(build_kjt(rows, plain).entries) if plain else {}
    labels = np.fromiter((r.label for r in rows), dtype=np.int64, count=len(rows))
    elapsed = time.perf_counter() - t0
    batch = ReaderBatch(
        batch_size=len(rows), kjts=kjts, ikjts=ikjts, labels=labels
    )
    batch.stage_timings.convert_s = elapsed
    return batch


def process(batch: ReaderBatch, transforms) -> ReaderBatch:
    """Apply element-wise transforms; IKJT features are transformed on
    their deduplicated values only and stay IKJTs."""
    t0 = time.perf_counter()
    by_key: dict[str, list[Transform]] = {}
    known = set(batch.all_keys())
    for t in transforms:
        if t.key not in known:
            raise ValueError(f"transform targets missing key {t.key!r}")
        by_key.setdefault(t.key, []).append(t)

    def run(key: str, jt: JaggedTensor) -> JaggedTensor:
        values = jt.values
        for t in by_key.get(key, ()):
            values = apply_transform(values, t)
        if values is jt.values:
            return jt
        return JaggedTensor(values=values, offsets=jt.offsets)

    kjts = {key: run(key, jt) for key, jt in batch.kjts.items()}
    ikjts = [
        IKJT(
            batch_size=ikjt.batch_size,
            group_keys=ikjt.group_keys,
            inverse_lookup=ikjt.inverse_lookup,
            per_feature={k: run(k, jt) for k, jt in ikjt.per_feature.items()},
        )
        for ikjt in batch.ikjts
    ]
    out = ReaderBatch(
        batch_size=batch.batch_size,
        kjts=kjts,
        ikjts=ikjts,
        labels=batch.labels,
        stage_timings=batch.stage_timings,
        bytes_in=batch.bytes_in,
        bytes_out=batch.bytes_out,
    )
    out.stage_timings.process_s += time.perf_counter() - t0
    return out


def emit(batch: ReaderBatch) -> bytes:
    """Serialize a processed batch with the canonical tensor wire format
    and record bytes_out."""
    parts = [struct.pack("<I", len(batch.ikjts))]
    for ikjt in batch.ikjts:
        parts.append(serialize_ikjt(ikjt))
    plain = batch.kjts
    parts.append(struct.pack("<B", 1 if plain else 0))
    if plain:
        parts.append(serialize_kjt(KJT(batch_size=batch.batch_size, entries=plain)))
    parts.append(struct.pack("<Q", batch.labels.size))
    parts.append(batch.labels.astype("<i8", copy=False).tobytes())
    payload = b"".join(parts)
    batch.bytes_out = len(payload)
    return payload


def read_batches(
    file: ColumnarFile, spec: DataloaderSpec, with_emit: bool = True
) -> Iterator[ReaderBatch]:
    """Full fill -> convert -> process pipeline over a columnar file."""
    stream = scan(file, spec.batch_size)
    while True:
        raw, fill_s = fill(stream)
        if raw is None:
            return
        batch = convert(raw.records, spec)
        batch.stage_timings.fill_s = fill_s
        batch.bytes_in = raw.bytes_read
        batch = process(batch, spec.transforms)
        if with_emit:
            emit(batch)
        yield batch


def _transform_to_json(t: Transform) -> dict:
    return {"op": t.op, "key": t.key, "param": t.param}


def save_dataloader_spec(path: str | Path, spec: DataloaderSpec) -> None:
    payload = {
        "keys": list(spec.keys),
        "dedup_sparse_features": [list(g) for g in spec.dedup_sparse_features],
        "transforms": [_transform_to_json(t) for t in spec.transforms],
        "batch_size": spec.batch_size,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_dataloader_spec(path: str | Path) -> DataloaderSpec:
    obj = json.loads(Path(path).read_text())
    return DataloaderSpec(
        keys=tuple(obj["keys"]),
        dedup_sparse_features=tuple(tuple(g) for g in obj["dedup_sparse_features"]),
        transforms=tuple(
            Transform(op=t["op"], key=t["key"], param=t.get("param"))
            for t in obj.get("transforms", [])
        ),
        batch_size=int(obj.get("batch_size", 4096)),
    )
