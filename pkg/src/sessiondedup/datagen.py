"""Synthetic session-centric impression log generator.

Each session draws a sample count, initializes its user-sequence
features once, and then mutates each feature between impressions with
probability ``change_prob`` (a mutation shifts the list by one: drop the
oldest ID, append a fresh one). Item-kind features are redrawn on every
impression. Records from all sessions are interleaved by a global
timestamp, modeling logs where a session's impressions are spread across
a partition rather than adjacent.

Everything is deterministic given the config seed: each session owns an
independent child RNG, so a session's content does not depend on how
many other sessions exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FeatureSpec",
    "SampleCountDist",
    "SessionConfig",
    "ImpressionRecord",
    "generate_dataset",
    "shard_logs",
    "serialize_log_records",
    "load_config",
    "save_config",
    "default_config",
    "splitmix64",
]

_LABEL_RATE = 0.1


@dataclass(frozen=True)
class FeatureSpec:
    """One sparse feature column.

    ``change_prob`` is the per-impression probability that a
    user_sequence feature mutates (so the unchanged rate d equals
    ``1 - change_prob``). Features sharing a ``sync_group`` mutate on the
    same impressions, which makes them safe to deduplicate as one group.
    """

    key: str
    kind: str  # "user_sequence" or "item"
    avg_len: float
    vocab_size: int
    change_prob: float = 0.0
    sync_group: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("user_sequence", "item"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.avg_len <= 0:
            raise ValueError("avg_len must be > 0")
        if self.kind == "user_sequence" and self.avg_len < 1:
            raise ValueError("user_sequence features need avg_len >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if not 0.0 <= self.change_prob <= 1.0:
            raise ValueError("change_prob must be in [0, 1]")

    @property
    def unchanged_prob(self) -> float:
        return 1.0 - self.change_prob


@dataclass(frozen=True)
class SampleCountDist:
    """Distribution of samples per session.

    kinds:
      fixed      - every session has exactly ``mean`` samples (integer)
      geometric  - P(k) = (1/S)(1-1/S)^(k-1), mean S = ``mean``
      empirical  - draw from ``histogram`` (count -> weight)
    """

    kind: str
    mean: float = 1.0
    histogram: dict[int, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "geometric", "empirical"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "empirical":
            if not self.histogram:
                raise ValueError("empirical distribution needs a histogram")
            if any(k < 1 for k in self.histogram):
                raise ValueError("sample counts must be >= 1")
            if any(w <= 0 for w in self.histogram.values()):
                raise ValueError("histogram weights must be > 0")
            mean = sum(k * w for k, w in self.histogram.items()) / sum(
                self.histogram.values()
            )
            object.__setattr__(self, "mean", mean)
        else:
            if self.mean < 1:
                raise ValueError("mean samples per session must be >= 1")
            if self.kind == "fixed" and self.mean != int(self.mean):
                raise ValueError("fixed distribution needs an integer mean")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.mean)
        if self.kind == "geometric":
            return int(rng.geometric(1.0 / self.mean))
        counts = sorted(self.histogram)
        weights = np.array([self.histogram[c] for c in counts], dtype=np.float64)
        return int(rng.choice(counts, p=weights / weights.sum()))


@dataclass(frozen=True)
class SessionConfig:
    num_sessions: int
    samples_per_session: SampleCountDist
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_sessions < 1:
            raise ValueError("num_sessions must be >= 1")


@dataclass
class ImpressionRecord:
    session_id: int
    timestamp: int
    features: dict[str, np.ndarray]
    label: int


def _draw_length(avg_len: float, rng: np.random.Generator) -> int:
    # floor(l) plus a Bernoulli on the fraction keeps the mean exact.
    base = int(avg_len)
    frac = avg_len - base
    return base + (1 if frac > 0 and rng.random() < frac else 0)


def _session_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _gen_session(
    session_id: int,
    count: int,
    specs: list[FeatureSpec],
    rng: np.random.Generator,
) -> list[dict[str, np.ndarray]]:
    """Feature dicts for one session's impressions, in session order."""
    # One mutation coin sequence per sync group so grouped features
    # change on exactly the same impressions.
    group_of = {
        s.key: (s.sync_group if s.sync_group is not None else f"_solo_{s.key}")
        for s in specs
        if s.kind == "user_sequence"
    }
    coins: dict[str, np.ndarray] = {}
    for s in specs:
        if s.kind != "user_sequence":
            continue
        g = group_of[s.key]
        if g not in coins:
            coins[g] = rng.random(count - 1) < s.change_prob
    rows: list[dict[str, np.ndarray]] = [dict() for _ in range(count)]
    for s in specs:
        if s.kind == "user_sequence":
            length = _draw_length(s.avg_len, rng)
            flips = coins[group_of[s.key]]
            # Shift-append update: impression i reads a length-window of
            # a shared pool, starting at the number of changes so far.
            shifts = np.zeros(count, dtype=np.int64)
            if count > 1:
                np.cumsum(flips, out=shifts[1:])
            pool = rng.integers(0, s.vocab_size, length + int(shifts[-1]), dtype=np.int64)
            pool.setflags(write=False)
            for i in range(count):
                rows[i][s.key] = pool[shifts[i] : shifts[i] + length]
        else:
            lengths = np.array(
                [_draw_length(s.avg_len, rng) for _ in range(count)], dtype=np.int64
            )
            flat = rng.integers(0, s.vocab_size, int(lengths.sum()), dtype=np.int64)
            flat.setflags(write=False)
            bounds = np.zeros(count + 1, dtype=np.int64)
            np.cumsum(lengths, out=bounds[1:])
            for i in range(count):
                rows[i][s.key] = flat[bounds[i] : bounds[i + 1]]
    return rows


def generate_dataset(
    session_cfg: SessionConfig, feature_specs: list[FeatureSpec]
) -> list[ImpressionRecord]:
    """Generate the full interleaved record stream for a config."""
    keys = [s.key for s in feature_specs]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate feature keys")
    all_records: list[ImpressionRecord] = []
    # Timestamps are drawn over one shared horizon so sessions overlap
    # heavily; a global sort then interleaves them.
    mean_s = session_cfg.samples_per_session.mean
    horizon = max(64, int(4 * session_cfg.num_sessions * mean_s))
    for idx in range(session_cfg.num_sessions):
        rng = _session_rng(session_cfg.seed, idx)
        count = session_cfg.samples_per_session.sample(rng)
        ts = np.sort(rng.integers(0, horizon, count))
        ts += np.arange(count)  # break ties: strictly increasing in session
        labels = rng.random(count) < _LABEL_RATE
        rows = _gen_session(idx, count, feature_specs, rng)
        for i in range(count):
            all_records.append(
                ImpressionRecord(
                    session_id=idx,
                    timestamp=int(ts[i]),
                    features=rows[i],
                    label=int(labels[i]),
                )
            )
    order = np.lexsort(
        (
            np.fromiter((r.session_id for r in all_records), dtype=np.int64),
            np.fromiter((r.timestamp for r in all_records), dtype=np.int64),
        )
    )
    return [all_records[i] for i in order]


def splitmix64(x: int) -> int:
    """Stateless 64-bit mix, used as the sharding hash."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def shard_logs(
    records: list[ImpressionRecord], num_shards: int, key: str = "session_id"
) -> list[list[ImpressionRecord]]:
    """Route records to shards, preserving stream order within each shard.

    ``session_id`` keying keeps every session whole on one shard;
    ``random_hash`` routes each record independently.
    """
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    if key not in ("session_id", "random_hash"):
        raise ValueError(f"unknown shard key {key!r}")
    shards: list[list[ImpressionRecord]] = [[] for _ in range(num_shards)]
    for pos, rec in enumerate(records):
        hashed = splitmix64(rec.session_id if key == "session_id" else pos)
        shards[hashed % num_shards].append(rec)
    return shards


def serialize_log_records(records: list[ImpressionRecord]) -> bytes:
    """Row-major varint serialization of records, for shard-level
    compression comparisons."""
    from .varint import encode_varints

    if not records:
        return b""
    # One flat stream keeps this a single codec call.
    pieces: list[np.ndarray] = []
    for rec in records:
        head = [rec.session_id, rec.timestamp, rec.label, len(rec.features)]
        head.extend(len(arr) for arr in rec.features.values())
        pieces.append(np.array(head, dtype=np.int64))
        pieces.extend(rec.features.values())
    return encode_varints(np.concatenate(pieces))


def _dist_to_json(dist: SampleCountDist) -> dict:
    if dist.kind == "empirical":
        return {
            "kind": "empirical",
            "histogram": {str(k): v for k, v in dist.histogram.items()},
        }
    return {"kind": dist.kind, "mean": dist.mean}


def _dist_from_json(obj: dict) -> SampleCountDist:
    if obj["kind"] == "empirical":
        hist = {int(k): float(v) for k, v in obj["histogram"].items()}
        return SampleCountDist(kind="empirical", histogram=hist)
    return SampleCountDist(kind=obj["kind"], mean=float(obj["mean"]))


def save_config(
    path: str | Path, session_cfg: SessionConfig, feature_specs: list[FeatureSpec]
) -> None:
    payload = {
        "seed": session_cfg.seed,
        "num_sessions": session_cfg.num_sessions,
        "samples_per_session": _dist_to_json(session_cfg.samples_per_session),
        "features": [
            {
                "key": s.key,
                "kind": s.kind,
                "avg_len": s.avg_len,
                "vocab_size": s.vocab_size,
                "change_prob": s.change_prob,
                "sync_group": s.sync_group,
            }
            for s in feature_specs
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_config(path: str | Path) -> tuple[SessionConfig, list[FeatureSpec]]:
    obj = json.loads(Path(path).read_text())
    cfg = SessionConfig(
        num_sessions=int(obj["num_sessions"]),
        samples_per_session=_dist_from_json(obj["samples_per_session"]),
        seed=int(obj.get("seed", 0)),
    )
    specs = [
        FeatureSpec(
            key=f["key"],
            kind=f["kind"],
            avg_len=float(f["avg_len"]),
            vocab_size=int(f["vocab_size"]),
            change_prob=float(f.get("change_prob", 0.0)),
            sync_group=f.get("sync_group"),
        )
        for f in obj["features"]
    ]
    return cfg, specs


def default_config(
    seed: int = 0, num_sessions: int = 6000
) -> tuple[SessionConfig, list[FeatureSpec]]:
    """High-duplication e-commerce-style config: geometric S=16, user
    features with d=0.85 (change_prob 0.15), two item features."""
    cfg = SessionConfig(
        num_sessions=num_sessions,
        samples_per_session=SampleCountDist(kind="geometric", mean=16.0),
        seed=seed,
    )
    user = dict(kind="user_sequence", change_prob=0.15)
    specs = [
        FeatureSpec(key="viewed_ids", avg_len=48, vocab_size=200_000, **user),
        FeatureSpec(key="liked_ids", avg_len=24, vocab_size=100_000, **user),
        FeatureSpec(key="clicked_ids", avg_len=12, vocab_size=100_000, **user),
        FeatureSpec(
            key="cart_item_ids",
            avg_len=16,
            vocab_size=50_000,
            sync_group="cart",
            **user,
        ),
        FeatureSpec(
            key="cart_seller_ids",
            avg_len=16,
            vocab_size=20_000,
            sync_group="cart",
            **user,
        ),
        FeatureSpec(key="item_id", kind="item", avg_len=1, vocab_size=200_000),
        FeatureSpec(key="item_category_ids", kind="item", avg_len=4, vocab_size=1_000),
    ]
    return cfg, specs
