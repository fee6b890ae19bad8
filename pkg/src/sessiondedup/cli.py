"""Command-line orchestration.

Subcommands:
  gen           generate a synthetic dataset file from a config
  cluster       rewrite a dataset clustered by (session_id, timestamp)
  characterize  duplication statistics for a dataset
  bench         run the reader + trainer pipeline, baseline vs dedup
  plotdata      turn a bench report into gnuplot-ready .dat files

Relative dataset paths resolve against $SESSIONDEDUP_DATA_DIR when they
do not exist locally. Every command is deterministic under a fixed seed
(bench reports carry wall-clock timings, which naturally vary).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import characterize as charmod
from . import datagen, reader, storage, trainer_sim

__all__ = ["main", "BenchReport", "cmd_gen", "cmd_cluster", "cmd_characterize", "cmd_bench"]

DATA_DIR_ENV = "SESSIONDEDUP_DATA_DIR"


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def _resolve_in(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    candidate = data_dir() / path
    if candidate.exists():
        return candidate
    raise FileNotFoundError(f"no such dataset: {path} (also tried {candidate})")


def _resolve_out(path: str) -> Path:
    p = Path(path)
    if p.is_absolute() or p.parent != Path("."):
        return p
    return data_dir() / p


@dataclass
class ModeTotals:
    batches: int = 0
    rows: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    fill_s: float = 0.0
    convert_s: float = 0.0
    process_s: float = 0.0
    stats: trainer_sim.IterationStats = field(default_factory=trainer_sim.IterationStats)

    def add_batch(self, b: reader.ReaderBatch, st: trainer_sim.IterationStats) -> None:
        self.batches += 1
        self.rows += b.batch_size
        self.bytes_in += b.bytes_in
        self.bytes_out += b.bytes_out
        self.fill_s += b.stage_timings.fill_s
        self.convert_s += b.stage_timings.convert_s
        self.process_s += b.stage_timings.process_s
        self.stats.a2a_bytes_fwd += st.a2a_bytes_fwd
        self.stats.a2a_bytes_back += st.a2a_bytes_back
        self.stats.lookup_count += st.lookup_count
        self.stats.activation_elements = max(
            self.stats.activation_elements, st.activation_elements
        )
        self.stats.pooling_mac_count += st.pooling_mac_count
        self.stats.index_select_elements += st.index_select_elements


@dataclass
class BenchReport:
    config: dict
    storage: dict
    reader: dict
    trainer: dict
    speedups: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _ratio(a: float, b: float) -> float:
    return a / b if b else 1.0


def _mode_report(t: ModeTotals) -> dict:
    return {
        "batches": t.batches,
        "rows": t.rows,
        "bytes_in": t.bytes_in,
        "bytes_out": t.bytes_out,
        "timings": {
            "fill_s": t.fill_s,
            "convert_s": t.convert_s,
            "process_s": t.process_s,
        },
        "iteration_stats": asdict(t.stats),
    }


def cmd_gen(args: argparse.Namespace) -> int:
    if args.config:
        cfg, specs = datagen.load_config(args.config)
    else:
        cfg, specs = datagen.default_config()
    if args.seed is not None:
        cfg = datagen.SessionConfig(
            num_sessions=cfg.num_sessions,
            samples_per_session=cfg.samples_per_session,
            seed=args.seed,
        )
    records = datagen.generate_dataset(cfg, specs)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    f = storage.write_table(
        records,
        out,
        stripe_rows=args.stripe_rows,
        clustering=args.clustering,
        level=args.level,
    )
    print(
        f"wrote {f.row_count} records, {len(f.stripes)} stripes, "
        f"{out.stat().st_size} bytes -> {out}"
    )
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    src = _resolve_in(args.dataset)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fin = storage.open_table(src)
    records = []
    for batch in storage.scan(fin, 65536):
        records.extend(batch.records)
    fout = storage.write_table(
        records,
        out,
        stripe_rows=args.stripe_rows,
        clustering="by_session",
        level=fin.level,
    )
    rep = storage.compression_report(fin, fout)
    print(f"clustered {fout.row_count} rows -> {out}")
    print(
        f"compressed bytes {rep.compressed_bytes_a} -> {rep.compressed_bytes_b} "
        f"(ratio {rep.ratio_a:.3f} -> {rep.ratio_b:.3f}, "
        f"relative {rep.relative_ratio:.3f})"
    )
    return 0


def cmd_characterize(args: argparse.Namespace) -> int:
    src = _resolve_in(args.dataset)
    f = storage.open_table(src)
    records = []
    for batch in storage.scan(f, 65536):
        records.extend(batch.records)
    keys = args.keys.split(",") if args.keys else list(f.feature_keys)
    keys = [k for k in keys if k]
    for k in keys:
        if k not in f.feature_keys:
            raise ValueError(f"unknown feature key {k!r}")
    stats = charmod.compute_dup_stats(records, keys, batch_size=args.batch_size)
    print(f"records: {len(records)}")
    print(
        f"samples/session: partition mean {stats.partition.mean:.3f}, "
        f"batch({args.batch_size}) mean {stats.per_batch.mean:.3f}"
    )
    if keys:
        print(f"{'feature':<20} {'exact%':>8} {'partial%':>9} {'avg_len':>8}")
        for k in keys:
            fs = stats.per_feature[k]
            print(
                f"{k:<20} {fs.exact_dup_pct:>8.2f} {fs.partial_dup_pct:>9.2f} "
                f"{fs.avg_len:>8.2f}"
            )
        print(
            f"byte-weighted: exact {stats.byte_weighted_exact_pct:.2f}% "
            f"partial {stats.byte_weighted_partial_pct:.2f}%"
        )
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(charmod.dup_stats_to_csv(stats))
        print(f"csv -> {out}")
    return 0


def _generic_model_spec(
    f: storage.ColumnarFile, dim: int, seed: int
) -> trainer_sim.ModelSpec:
    """Fallback model for arbitrary datasets: every feature its own
    sum-pooled dedup group, table rows sized from the data."""
    max_id = {k: 0 for k in f.feature_keys}
    for batch in storage.scan(f, 65536):
        for rec in batch.records:
            for k, arr in rec.features.items():
                if arr.size:
                    m = int(arr.max())
                    if m > max_id[k]:
                        max_id[k] = m
    tables = {
        k: trainer_sim.TableConfig(rows=max_id[k] + 1, dim=dim)
        for k in f.feature_keys
    }
    groups = tuple(
        trainer_sim.GroupConfig(keys=(k,), pooling="sum") for k in f.feature_keys
    )
    return trainer_sim.ModelSpec(tables=tables, groups=groups, plain={}, seed=seed)


def _model_spec_for(
    f: storage.ColumnarFile, args: argparse.Namespace
) -> trainer_sim.ModelSpec:
    if args.model_spec:
        return trainer_sim.load_model_spec(args.model_spec)
    _, default_specs = datagen.default_config()
    if set(f.feature_keys) == {s.key for s in default_specs}:
        return trainer_sim.default_model_spec(default_specs, seed=args.seed or 0)
    return _generic_model_spec(f, 16, args.seed or 0)


def cmd_bench(args: argparse.Namespace) -> int:
    src = _resolve_in(args.dataset)
    f = storage.open_table(src)
    model = _model_spec_for(f, args)
    if args.spec:
        dl_spec = reader.load_dataloader_spec(args.spec)
    else:
        dl_spec = reader.DataloaderSpec(
            keys=model.all_keys,
            dedup_sparse_features=tuple(g.keys for g in model.groups),
            transforms=(),
            batch_size=args.batch_size,
        )
    plan = trainer_sim.make_round_robin_plan(model, args.ranks)
    tables = trainer_sim.build_tables(model)

    run_dedup = args.mode in ("dedup", "both")
    run_baseline = args.mode in ("baseline", "both")
    totals = {"baseline": ModeTotals(), "dedup": ModeTotals()}
    dedup_iter = (
        reader.read_batches(f, dl_spec) if run_dedup else iter(())
    )
    base_iter = (
        reader.read_batches(f, dl_spec.without_dedup()) if run_baseline else iter(())
    )
    n = 0
    scores_equal = True
    while True:
        if args.batches and n >= args.batches:
            break
        db = next(dedup_iter, None) if run_dedup else None
        bb = next(base_iter, None) if run_baseline else None
        if db is None and bb is None:
            break
        sd = sb = None
        if db is not None:
            if db.batch_size < plan.num_ranks:
                break  # tail smaller than the rank count; stop cleanly
            sd, std = trainer_sim.forward_iteration(db, model, plan, "dedup", tables)
            totals["dedup"].add_batch(db, std)
        if bb is not None:
            if bb.batch_size < plan.num_ranks:
                break
            sb, stb = trainer_sim.forward_iteration(bb, model, plan, "baseline", tables)
            totals["baseline"].add_batch(bb, stb)
        if sd is not None and sb is not None:
            if not np.array_equal(sd, sb):
                scores_equal = False
                raise RuntimeError(
                    "dedup and baseline scores diverged; this build is broken"
                )
        n += 1

    raw, comp = storage.stream_sizes(f)
    dd, bl = totals["dedup"], totals["baseline"]
    speedups = {}
    if run_dedup and run_baseline:
        speedups = {
            "scores_equal": scores_equal,
            "bytes_out_ratio": _ratio(bl.bytes_out, dd.bytes_out),
            "a2a_fwd_ratio": _ratio(bl.stats.a2a_bytes_fwd, dd.stats.a2a_bytes_fwd),
            "a2a_back_ratio": _ratio(bl.stats.a2a_bytes_back, dd.stats.a2a_bytes_back),
            "lookup_ratio": _ratio(bl.stats.lookup_count, dd.stats.lookup_count),
            "mac_ratio": _ratio(bl.stats.pooling_mac_count, dd.stats.pooling_mac_count),
        }
    report = BenchReport(
        config={
            "dataset": str(src),
            "batch_size": args.batch_size,
            "ranks": args.ranks,
            "mode": args.mode,
            "seed": args.seed,
            "batches": n,
            "model_groups": [list(g.keys) for g in model.groups],
        },
        storage={
            "raw_stream_bytes": raw,
            "compressed_stream_bytes": comp,
            "ratio": _ratio(raw, comp),
        },
        reader={
            mode: _mode_report(t)
            for mode, t in totals.items()
            if t.batches
        },
        trainer={
            mode: asdict(t.stats) for mode, t in totals.items() if t.batches
        },
        speedups=speedups,
    )
    payload = report.to_json()
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(payload)
        print(f"report -> {out}")
    else:
        print(payload, end="")
    return 0


def cmd_plotdata(args: argparse.Namespace) -> int:
    report = json.loads(_resolve_in(args.report).read_text())
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# counter baseline dedup ratio"]
    tr = report.get("trainer", {})
    if "baseline" in tr and "dedup" in tr:
        for key in tr["baseline"]:
            b, d = tr["baseline"][key], tr["dedup"][key]
            lines.append(f"{key} {b} {d} {_ratio(b, d):.6f}")
    (out_dir / "counters.dat").write_text("\n".join(lines) + "\n")
    lines = ["# stage baseline_s dedup_s"]
    rd = report.get("reader", {})
    if "baseline" in rd and "dedup" in rd:
        for stage in ("fill_s", "convert_s", "process_s"):
            lines.append(
                f"{stage} {rd['baseline']['timings'][stage]:.6f} "
                f"{rd['dedup']['timings'][stage]:.6f}"
            )
    (out_dir / "stages.dat").write_text("\n".join(lines) + "\n")
    print(f"plot data -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sessiondedup",
        description="Session-centric dedup pipeline: generate, cluster, "
        "characterize, and benchmark.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="generator config JSON (default: built-in)")
    g.add_argument("--seed", type=int, default=None, help="override config seed")
    g.add_argument("--out", default="dataset.sesscol")
    g.add_argument("--clustering", choices=["none", "by_session"], default="none")
    g.add_argument("--stripe-rows", type=int, default=storage.DEFAULT_STRIPE_ROWS)
    g.add_argument("--level", type=int, default=storage.DEFAULT_LEVEL)
    g.set_defaults(func=cmd_gen, stage="gen")

    c = sub.add_parser("cluster", help="rewrite a dataset clustered by session")
    c.add_argument("dataset")
    c.add_argument("--out", required=True)
    c.add_argument("--stripe-rows", type=int, default=storage.DEFAULT_STRIPE_ROWS)
    c.set_defaults(func=cmd_cluster, stage="cluster")

    ch = sub.add_parser("characterize", help="duplication statistics")
    ch.add_argument("dataset")
    ch.add_argument("--keys", default=None, help="comma-separated feature keys")
    ch.add_argument("--batch-size", type=int, default=4096)
    ch.add_argument("--out", default=None, help="also write CSV here")
    ch.set_defaults(func=cmd_characterize, stage="characterize")

    b = sub.add_parser("bench", help="reader+trainer pipeline benchmark")
    b.add_argument("dataset")
    b.add_argument("--spec", default=None, help="dataloader spec JSON")
    b.add_argument("--model-spec", default=None, help="model spec JSON")
    b.add_argument("--batch-size", type=int, default=4096)
    b.add_argument("--ranks", type=int, default=2)
    b.add_argument("--mode", choices=["baseline", "dedup", "both"], default="both")
    b.add_argument("--batches", type=int, default=0, help="limit batches (0 = all)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="write report JSON here")
    b.set_defaults(func=cmd_bench, stage="bench")

    pl = sub.add_parser("plotdata", help="emit gnuplot data from a bench report")
    pl.add_argument("report")
    pl.add_argument("--out", default="plots")
    pl.set_defaults(func=cmd_plotdata, stage="plotdata")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
