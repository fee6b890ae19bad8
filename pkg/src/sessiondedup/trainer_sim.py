"""Desk-scale forward sparse path over simulated ranks.

Simulates one training iteration's sparse pipeline: route feature slices
to the ranks owning their embedding tables (the sparse-data
distribution, SDD), look up embeddings, pool per row (element-wise or
attention), send pooled vectors back, expand deduplicated rows, and
score through a fixed interaction stub.

The baseline path runs every batch row; the dedup path runs each unique
row once and expands afterwards. Both paths reduce each logical row's
elements in the same order with the same float32 routines, so their
scores match bit for bit, which the test suite asserts exhaustively.

"Network bytes" are serialized-slice sizes, not wall-clock transfers,
and R=1 counts local serialization rather than zero: byte volume is the
desk-scale observable, independent of transport.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .reader import ReaderBatch
from .tensors import JaggedTensor, IKJT, jagged_index_select, slice_stream_bytes

__all__ = [
    "EmbeddingTable",
    "ShardingPlan",
    "IterationStats",
    "TableConfig",
    "GroupConfig",
    "ModelSpec",
    "AttentionParams",
    "KeySlice",
    "SddResult",
    "RankFeatures",
    "sdd",
    "embedding_lookup",
    "pool",
    "attention_pool",
    "forward_iteration",
    "split_batch",
    "slice_ikjt_rows",
    "make_round_robin_plan",
    "build_tables",
    "activation_bytes",
    "load_model_spec",
    "save_model_spec",
    "default_model_spec",
]

ELEMENT_POOLING = ("sum", "avg", "max")
POOLING_OPS = ELEMENT_POOLING + ("attention",)


def _key_seed(base: int, *names: str) -> np.random.Generator:
    tag = hashlib.blake2b("|".join(names).encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(
        np.random.SeedSequence((base, int.from_bytes(tag, "little")))
    )


@dataclass(frozen=True)
class EmbeddingTable:
    key: str
    rows: int
    dim: int
    weights: np.ndarray  # (rows, dim) float32

    def __post_init__(self) -> None:
        if self.weights.shape != (self.rows, self.dim):
            raise ValueError("weight shape does not match rows x dim")
        if self.weights.dtype != np.float32:
            raise ValueError("weights must be float32")
        self.weights.setflags(write=False)

    @classmethod
    def create(cls, key: str, rows: int, dim: int, seed: int) -> "EmbeddingTable":
        rng = _key_seed(seed, "table", key)
        weights = rng.uniform(-0.1, 0.1, size=(rows, dim)).astype(np.float32)
        return cls(key=key, rows=rows, dim=dim, weights=weights)


@dataclass(frozen=True)
class AttentionParams:
    """Single-head scaled dot-product attention projections."""

    dim: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @classmethod
    def create(cls, name: str, dim: int, seed: int) -> "AttentionParams":
        rng = _key_seed(seed, "attention", name)
        mats = [
            rng.uniform(-0.25, 0.25, size=(dim, dim)).astype(np.float32)
            for _ in range(4)
        ]
        for m in mats:
            m.setflags(write=False)
        return cls(dim=dim, w_q=mats[0], w_k=mats[1], w_v=mats[2], w_o=mats[3])


@dataclass(frozen=True)
class TableConfig:
    rows: int
    dim: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.dim < 1:
            raise ValueError("table rows and dim must be >= 1")


@dataclass(frozen=True)
class GroupConfig:
    keys: tuple[str, ...]
    pooling: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", tuple(self.keys))
        if not self.keys:
            raise ValueError("empty feature group")
        if self.pooling not in POOLING_OPS:
            raise ValueError(f"unknown pooling op {self.pooling!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Sparse-path model description.

    ``groups`` are the dedup feature groups (each one IKJT in dedup
    mode); ``plain`` maps the remaining keys to an element-wise pooling
    op. All tables share one embedding dim so pooled vectors can
    interact via pairwise dot products.
    """

    tables: dict[str, TableConfig]
    groups: tuple[GroupConfig, ...]
    plain: dict[str, str]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", dict(self.tables))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "plain", dict(self.plain))
        dims = {cfg.dim for cfg in self.tables.values()}
        if len(dims) > 1:
            raise ValueError("all tables must share one embedding dim")
        seen: set[str] = set()
        for g in self.groups:
            for key in g.keys:
                if key in seen:
                    raise ValueError(f"feature {key!r} appears in two groups")
                if key not in self.tables:
                    raise ValueError(f"grouped feature {key!r} has no table")
                seen.add(key)
        for key, op in self.plain.items():
            if key in seen:
                raise ValueError(f"plain feature {key!r} also grouped")
            if key not in self.tables:
                raise ValueError(f"plain feature {key!r} has no table")
            if op not in ELEMENT_POOLING:
                raise ValueError(f"plain pooling must be element-wise, got {op!r}")
            seen.add(key)
        if seen != set(self.tables):
            unused = set(self.tables) - seen
            raise ValueError(f"tables with no feature assignment: {sorted(unused)}")

    @property
    def dim(self) -> int:
        return next(iter(self.tables.values())).dim

    @property
    def all_keys(self) -> tuple[str, ...]:
        keys = [k for g in self.groups for k in g.keys]
        keys.extend(self.plain)
        return tuple(keys)


@dataclass(frozen=True)
class ShardingPlan:
    num_ranks: int
    assignment: dict[str, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment", dict(self.assignment))
        if self.num_ranks < 1:
            raise ValueError("num_ranks must be >= 1")
        for key, rank in self.assignment.items():
            if not 0 <= rank < self.num_ranks:
                raise ValueError(f"feature {key!r} assigned to invalid rank {rank}")


def make_round_robin_plan(spec: ModelSpec, num_ranks: int) -> ShardingPlan:
    """Round-robin over groups then plain keys; a group's features stay
    on one rank so attention sees its whole sequence locally."""
    assignment: dict[str, int] = {}
    unit = 0
    for g in spec.groups:
        for key in g.keys:
            assignment[key] = unit % num_ranks
        unit += 1
    for key in spec.plain:
        assignment[key] = unit % num_ranks
        unit += 1
    return ShardingPlan(num_ranks=num_ranks, assignment=assignment)


def build_tables(spec: ModelSpec) -> dict[str, EmbeddingTable]:
    return {
        key: EmbeddingTable.create(key, cfg.rows, cfg.dim, spec.seed)
        for key, cfg in spec.tables.items()
    }


@dataclass
class IterationStats:
    a2a_bytes_fwd: int = 0
    a2a_bytes_back: int = 0
    lookup_count: int = 0
    activation_elements: int = 0  # peak per (rank, feature) slice
    pooling_mac_count: int = 0
    index_select_elements: int = 0

    def dominated_by(self, other: "IterationStats") -> bool:
        """True when every counter here is <= the other's."""
        return (
            self.a2a_bytes_fwd <= other.a2a_bytes_fwd
            and self.a2a_bytes_back <= other.a2a_bytes_back
            and self.lookup_count <= other.lookup_count
            and self.activation_elements <= other.activation_elements
            and self.pooling_mac_count <= other.pooling_mac_count
            and self.index_select_elements <= other.index_select_elements
        )


def activation_bytes(
    batch_size: int, list_len: float, dim: int, elem_bytes: int = 4
) -> int:
    """Bytes to hold one feature's pre-pooling activations."""
    return int(batch_size * list_len * dim * elem_bytes)


@dataclass(frozen=True)
class KeySlice:
    """One rank's transmitted slice for one feature."""

    src_rank: int
    tensor: JaggedTensor


@dataclass
class SddResult:
    # routed[owner_rank][key] lists every source rank's slice in rank order
    routed: list[dict[str, list[KeySlice]]]
    a2a_bytes_fwd: int
    values_bytes_by_key: dict[str, int]


@dataclass(frozen=True)
class RankFeatures:
    """What one rank contributes to the SDD exchange.

    ``slices`` holds the per-key jagged slices actually transmitted
    (deduplicated for grouped features in dedup mode); inverse_lookup
    slices stay out of this structure entirely, they never travel.
    """

    batch_size: int
    slices: dict[str, JaggedTensor]


def sdd(local_batches: list[RankFeatures], plan: ShardingPlan) -> SddResult:
    """Route every rank's feature slices to the owning ranks.

    a2a_bytes_fwd counts the canonical serialized size of each
    transmitted (offsets, values) slice pair, local destinations
    included, so R=1 reports the local serialization size.
    """
    keys = set(plan.assignment)
    for r, rf in enumerate(local_batches):
        if set(rf.slices) != keys:
            missing = keys.symmetric_difference(rf.slices)
            raise ValueError(f"rank {r} slice keys do not match plan: {sorted(missing)}")
    routed: list[dict[str, list[KeySlice]]] = [
        {} for _ in range(plan.num_ranks)
    ]
    total = 0
    values_bytes: dict[str, int] = {k: 0 for k in keys}
    for key, owner in plan.assignment.items():
        lst = routed[owner].setdefault(key, [])
        for src, rf in enumerate(local_batches):
            jt = rf.slices[key]
            total += slice_stream_bytes(jt)
            values_bytes[key] += 8 * jt.values.size
            lst.append(KeySlice(src_rank=src, tensor=jt))
    return SddResult(routed=routed, a2a_bytes_fwd=total, values_bytes_by_key=values_bytes)


def embedding_lookup(
    jt: JaggedTensor, table: EmbeddingTable, key: str = ""
) -> np.ndarray:
    """One embedding vector per values element, in values order."""
    vals = jt.values
    if vals.size:
        bad = np.flatnonzero((vals < 0) | (vals >= table.rows))
        if bad.size:
            p = int(bad[0])
            raise ValueError(
                f"feature {key or table.key!r}: ID {int(vals[p])} at position {p} "
                f"out of range [0, {table.rows})"
            )
    return table.weights[vals]


def pool(activations: np.ndarray, offsets: np.ndarray, op: str) -> np.ndarray:
    """Per-row reduction; empty rows produce zero vectors for every op.

    Reductions run left-to-right within each row (ufunc.reduceat), so
    identical rows give bit-identical outputs.
    """
    if op not in ELEMENT_POOLING:
        raise ValueError(f"unknown pooling op {op!r}")
    n_rows = offsets.size
    dim = activations.shape[1]
    bounds = np.append(offsets, activations.shape[0])
    lengths = np.diff(bounds)
    out = np.zeros((n_rows, dim), dtype=np.float32)
    nonempty = lengths > 0
    if nonempty.any():
        starts = bounds[:-1][nonempty]
        ufunc = np.maximum if op == "max" else np.add
        out[nonempty] = ufunc.reduceat(activations, starts, axis=0)
        if op == "avg":
            out[nonempty] /= lengths[nonempty].astype(np.float32)[:, None]
    return out


def attention_pool(
    per_key_activations: list[tuple[np.ndarray, np.ndarray]],
    params: AttentionParams,
) -> tuple[np.ndarray, int]:
    """Single-head attention over each row's concatenated group sequence.

    Input: per group feature, (activations, offsets) with a shared row
    count. Returns one output vector per row plus the multiply-accumulate
    count (3nd^2 + 2n^2 d + d^2 per non-empty row of sequence length n).
    """
    if not per_key_activations:
        raise ValueError("attention needs at least one feature")
    n_rows = per_key_activations[0][1].size
    d = params.dim
    for acts, offs in per_key_activations:
        if offs.size != n_rows:
            raise ValueError("group features disagree on row count")
        if acts.shape[1] != d:
            raise ValueError(
                f"activation dim {acts.shape[1]} != attention dim {d}"
            )
    scale = np.float32(1.0 / math.sqrt(d))
    out = np.zeros((n_rows, d), dtype=np.float32)
    macs = 0
    all_bounds = [
        (acts, np.append(offs, acts.shape[0])) for acts, offs in per_key_activations
    ]
    for i in range(n_rows):
        segs = [acts[b[i] : b[i + 1]] for acts, b in all_bounds]
        x = segs[0] if len(segs) == 1 else np.concatenate(segs, axis=0)
        n = x.shape[0]
        if n == 0:
            continue
        q = x @ params.w_q
        k = x @ params.w_k
        v = x @ params.w_v
        scores = (q @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        ctx = scores @ v
        pooled = ctx.mean(axis=0)
        out[i] = pooled @ params.w_o
        macs += 3 * n * d * d + 2 * n * n * d + d * d
    return out, macs


def slice_ikjt_rows(ikjt: IKJT, start: int, stop: int) -> IKJT:
    """Restrict an IKJT to a contiguous batch-row range without
    re-hashing: renumber the surviving unique rows in first-occurrence
    order and select their tensors."""
    if not 0 <= start < stop <= ikjt.batch_size:
        raise ValueError(f"bad row range [{start}, {stop})")
    inv = ikjt.inverse_lookup[start:stop]
    uniq, first_idx = np.unique(inv, return_index=True)
    order = uniq[np.argsort(first_idx, kind="stable")]
    lut = np.full(ikjt.unique_count, -1, dtype=np.int64)
    lut[order] = np.arange(order.size, dtype=np.int64)
    return IKJT(
        batch_size=stop - start,
        group_keys=ikjt.group_keys,
        inverse_lookup=lut[inv],
        per_feature={
            key: jagged_index_select(jt, order)
            for key, jt in ikjt.per_feature.items()
        },
    )


def split_batch(batch: ReaderBatch, num_ranks: int) -> list[ReaderBatch]:
    """Contiguous per-rank chunks of one reader batch (data parallelism).

    The first B mod R chunks take the extra rows. Dedup tensors are
    sub-sliced, never re-deduplicated.
    """
    if num_ranks < 1:
        raise ValueError("num_ranks must be >= 1")
    if batch.batch_size < num_ranks:
        raise ValueError(
            f"cannot split {batch.batch_size} rows across {num_ranks} ranks"
        )
    base, extra = divmod(batch.batch_size, num_ranks)
    chunks = []
    start = 0
    for r in range(num_ranks):
        stop = start + base + (1 if r < extra else 0)
        rows = np.arange(start, stop, dtype=np.int64)
        chunks.append(
            ReaderBatch(
                batch_size=stop - start,
                kjts={
                    key: jagged_index_select(jt, rows)
                    for key, jt in batch.kjts.items()
                },
                ikjts=[slice_ikjt_rows(ik, start, stop) for ik in batch.ikjts],
                labels=batch.labels[start:stop],
            )
        )
        start = stop
    return chunks


def _identity_ikjt(keys: tuple[str, ...], kjts: dict[str, JaggedTensor], b: int) -> IKJT:
    # Baseline path: same group structure, every row its own unique row.
    return IKJT(
        batch_size=b,
        group_keys=keys,
        inverse_lookup=np.arange(b, dtype=np.int64),
        per_feature={k: kjts[k] for k in keys},
    )


def _group_encodings(
    chunk: ReaderBatch, spec: ModelSpec, mode: str
) -> list[IKJT]:
    """One IKJT per spec group, taken from the batch (dedup) or built
    with an identity inverse (baseline)."""
    out = []
    for g in spec.groups:
        if mode == "dedup":
            match = [ik for ik in chunk.ikjts if ik.group_keys == g.keys]
            if not match:
                raise ValueError(
                    f"batch has no IKJT for group {list(g.keys)}; "
                    "reader spec and model spec disagree"
                )
            out.append(match[0])
        else:
            missing = [k for k in g.keys if k not in chunk.kjts]
            if missing:
                raise ValueError(
                    f"baseline batch lacks plain tensors for {missing}"
                )
            out.append(_identity_ikjt(g.keys, chunk.kjts, chunk.batch_size))
    return out


def forward_iteration(
    batch: ReaderBatch,
    spec: ModelSpec,
    plan: ShardingPlan,
    mode: str,
    tables: dict[str, EmbeddingTable] | None = None,
) -> tuple[np.ndarray, IterationStats]:
    """One forward sparse pass; returns per-row scores and counters.

    ``mode`` must match how the batch was read: "dedup" consumes the
    batch's IKJTs, "baseline" consumes plain tensors for every key.
    Scores are float32 and bit-identical across modes and rank counts.
    """
    if mode not in ("baseline", "dedup"):
        raise ValueError(f"unknown mode {mode!r}")
    if tables is None:
        tables = build_tables(spec)
    dim = spec.dim
    stats = IterationStats()
    chunks = split_batch(batch, plan.num_ranks)
    chunk_groups = [_group_encodings(c, spec, mode) for c in chunks]

    # Build each rank's transmitted slices and run the exchange.
    rank_feats = []
    for c, groups in zip(chunks, chunk_groups):
        slices: dict[str, JaggedTensor] = {}
        for ik in groups:
            for key in ik.group_keys:
                slices[key] = ik.per_feature[key]
        for key in spec.plain:
            if key not in c.kjts:
                raise ValueError(f"batch lacks plain feature {key!r}")
            slices[key] = c.kjts[key]
        rank_feats.append(RankFeatures(batch_size=c.batch_size, slices=slices))
    exchange = sdd(rank_feats, plan)
    stats.a2a_bytes_fwd = exchange.a2a_bytes_fwd

    attn_params = {
        gi: AttentionParams.create("/".join(g.keys), dim, spec.seed)
        for gi, g in enumerate(spec.groups)
        if g.pooling == "attention"
    }

    # Pooled outputs per (source chunk, block). Computation is organized
    # by owner rank, mirroring where the work lands, but every slice is
    # reduced with the same routines in both modes.
    per_chunk_blocks: list[list[np.ndarray]] = [[] for _ in chunks]
    for gi, g in enumerate(spec.groups):
        owner = plan.assignment[g.keys[0]]
        key_slices = {key: exchange.routed[owner][key] for key in g.keys}
        for src, ik in enumerate(((cg[gi]) for cg in chunk_groups)):
            u = ik.unique_count
            acts = {}
            for key in g.keys:
                jt = key_slices[key][src].tensor
                a = embedding_lookup(jt, tables[key], key)
                acts[key] = (a, jt.offsets)
                stats.lookup_count += jt.values.size
                stats.activation_elements = max(
                    stats.activation_elements, jt.values.size * dim
                )
            if g.pooling == "attention":
                pooled, macs = attention_pool(
                    [acts[key] for key in g.keys], attn_params[gi]
                )
                stats.pooling_mac_count += macs
                blocks = [pooled]
            else:
                blocks = []
                for key in g.keys:
                    a, offs = acts[key]
                    blocks.append(pool(a, offs, g.pooling))
                    stats.pooling_mac_count += a.shape[0] * dim
            stats.a2a_bytes_back += sum(b.shape[0] * dim * 4 for b in blocks)
            inv = ik.inverse_lookup
            for b in blocks:
                per_chunk_blocks[src].append(b[inv])
                stats.index_select_elements += inv.size * dim
    for key, op in spec.plain.items():
        owner = plan.assignment[key]
        for src, ks in enumerate(exchange.routed[owner][key]):
            jt = ks.tensor
            a = embedding_lookup(jt, tables[key], key)
            stats.lookup_count += jt.values.size
            stats.activation_elements = max(
                stats.activation_elements, jt.values.size * dim
            )
            pooled = pool(a, jt.offsets, op)
            stats.pooling_mac_count += a.shape[0] * dim
            stats.a2a_bytes_back += pooled.shape[0] * dim * 4
            per_chunk_blocks[src].append(pooled)

    # Interaction stub: pairwise dots over pooled blocks, diagonal
    # included so a single-block model still produces a signal.
    scores = []
    for src, blocks in enumerate(per_chunk_blocks):
        z = np.stack(blocks, axis=1)  # (B, F, dim) float32
        inter = np.einsum("bfd,bgd->bfg", z, z)
        fi, fj = np.triu_indices(z.shape[1])
        feats = inter[:, fi, fj].astype(np.float32, copy=False)
        logit = feats.mean(axis=1, dtype=np.float32)
        scores.append((1.0 / (1.0 + np.exp(-logit))).astype(np.float32))
    return np.concatenate(scores), stats


def save_model_spec(path: str | Path, spec: ModelSpec) -> None:
    payload = {
        "seed": spec.seed,
        "tables": {
            key: {"rows": cfg.rows, "dim": cfg.dim}
            for key, cfg in spec.tables.items()
        },
        "groups": [
            {"keys": list(g.keys), "pooling": g.pooling} for g in spec.groups
        ],
        "plain": dict(spec.plain),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_model_spec(path: str | Path) -> ModelSpec:
    obj = json.loads(Path(path).read_text())
    return ModelSpec(
        tables={
            key: TableConfig(rows=int(t["rows"]), dim=int(t["dim"]))
            for key, t in obj["tables"].items()
        },
        groups=tuple(
            GroupConfig(keys=tuple(g["keys"]), pooling=g["pooling"])
            for g in obj["groups"]
        ),
        plain=dict(obj.get("plain", {})),
        seed=int(obj.get("seed", 0)),
    )


def default_model_spec(feature_specs, dim: int = 16, seed: int = 0) -> ModelSpec:
    """Model spec aligned with the default generator config: singleton
    groups for the big user sequences, attention over the cart pair,
    plain item features."""
    tables = {
        fs.key: TableConfig(rows=fs.vocab_size, dim=dim) for fs in feature_specs
    }
    by_key = {fs.key: fs for fs in feature_specs}
    groups = []
    grouped: set[str] = set()
    sync: dict[str, list[str]] = {}
    for fs in feature_specs:
        if fs.kind != "user_sequence":
            continue
        if fs.sync_group is not None:
            sync.setdefault(fs.sync_group, []).append(fs.key)
    for name, keys in sync.items():
        groups.append(GroupConfig(keys=tuple(keys), pooling="attention"))
        grouped.update(keys)
    element_ops = ["sum", "max", "avg"]
    i = 0
    for fs in feature_specs:
        if fs.kind == "user_sequence" and fs.key not in grouped:
            groups.append(
                GroupConfig(keys=(fs.key,), pooling=element_ops[i % len(element_ops)])
            )
            grouped.add(fs.key)
            i += 1
    plain = {
        fs.key: "sum" for fs in feature_specs if fs.key not in grouped
    }
    return ModelSpec(tables=tables, groups=tuple(groups), plain=plain, seed=seed)
