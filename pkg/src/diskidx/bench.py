"""Benchmark harness: runs (index x workload x config) cells and reports
block-count metrics, worst-case bound checks, and dataset profiles.

Block counts are the primary metric: they are bit-identical across repeated
runs of the same configuration. Wall-clock numbers are collected but
advisory. Latency percentiles are computed over per-operation "cost units"
(blocks read + blocks written), which capture tail behaviour such as
structural-modification bursts independently of the hardware.

Hybrid mode pins each index's non-leaf structure in memory (B+-tree and
FITing-tree directory levels, the non-leaf levels of every PGM run, the
whole ALEX inner file); pinned reads are counted as buffer hits, writes
still go to disk. LIPP is excluded from hybrid mode.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .alex import AlexIndex
from .blockstore import BlockBuffer
from .bptree import BPTreeIndex
from .fiting import FitingTree
from .lipp import LippIndex
from .pgm import PgmIndex
from .workload import (
    OP_INSERT,
    OP_LOOKUP,
    OP_SCAN,
    Dataset,
    WorkloadSpec,
    gen_synthetic,
    load_sosd,
    make_workload,
    profile,
)

INDEXES = {
    "bptree": BPTreeIndex,
    "fiting": FitingTree,
    "pgm": PgmIndex,
    "alex": AlexIndex,
    "lipp": LippIndex,
}

OP_NAMES = {OP_LOOKUP: "lookup", OP_INSERT: "insert", OP_SCAN: "scan"}

BOUND_SLACK = 2  # covers meta/header misalignment the closed forms omit


@dataclass
class RunConfig:
    index: str
    workload: WorkloadSpec
    dataset: str = "synthetic:uniform:n=100000"
    block_size: int = 4096
    buffer_capacity: int = 0
    hybrid: bool = False
    fill: float = 0.8
    eps: int = 64
    buffer_size: int = 256
    density_lo: float = 0.6
    density_hi: float = 0.8
    rebuild_ratio: float = 1.0
    layout: int = 2
    data_target: int = 1024
    seed: int = 0
    workdir: str | None = None

    def __post_init__(self):
        if self.index not in INDEXES:
            raise ValueError(f"unknown index {self.index!r}")
        if self.hybrid and self.index == "lipp":
            raise ValueError("hybrid mode is not supported for lipp")


@dataclass
class Metrics:
    config: dict
    per_op: dict            # op kind -> aggregate dict
    phases: dict            # phase -> {"reads": n, "writes": n}
    storage_bytes: int
    pinned_bytes: int
    smo_count: int
    wall_seconds: float
    bulk_wall_seconds: float

    def block_metrics(self) -> dict:
        """The deterministic part, for reproducibility comparisons."""
        return {
            "per_op": self.per_op,
            "phases": self.phases,
            "storage_bytes": self.storage_bytes,
            "smo_count": self.smo_count,
        }


# ---------------------------------------------------------------------------
# analytic worst-case block counts


def _logc(x: float, base: float) -> int:
    """ceil(log_base(x)), clamped to at least one level."""
    if x <= base:
        return 1
    return max(1, math.ceil(math.log(x) / math.log(base)))


def cost_bound(index_kind: str, op_kind: str, params: dict, z: int = 100) -> int:
    """Worst-case blocks read for one operation, from the closed forms.

    Logs over tree structures use the effective branch factor; logs written
    as plain "log" use base 2. Every fractional term is rounded up and each
    log term counts at least one level.
    """
    rpb = params["rec_per_block"]
    n = params["n"]
    if index_kind == "bptree":
        base = _logc(n, params["branch"])
        if op_kind == "lookup":
            return base
        if op_kind == "scan":
            return base + math.ceil(z / rpb)
        return 2 * base
    if index_kind == "fiting":
        base = _logc(params["p"], params["branch"]) + math.ceil(2 * params["eps"] / rpb)
        if op_kind == "lookup":
            return base + 1  # segment insert buffer
        if op_kind == "scan":
            return base + 1 + math.ceil(z / rpb)
        return 2 * _logc(params["p"], params["branch"]) + 1 + math.ceil(2 * params["m"] / rpb)
    if index_kind == "pgm":
        probe = sum(max(1, math.ceil(math.log2(max(c / rpb, 2)))) for c in params["run_counts"])
        probe += params["array_blocks"]
        if op_kind == "lookup":
            return probe
        if op_kind == "scan":
            return probe + (len(params["run_counts"]) + 1) * math.ceil(z / rpb)
        return max(1, math.ceil(math.log2(max(n / rpb, 2))))
    if index_kind == "alex":
        base = math.ceil(math.log2(max(n, 2))) + \
            max(1, math.ceil(math.log2(max(params["m"] / rpb, 2)))) + 1
        if op_kind == "lookup":
            return base
        if op_kind == "scan":
            return base + math.ceil(z / rpb) + 3
        return (1 + math.ceil(2 * params["m"] / rpb)) * math.ceil(math.log2(max(n, 2))) + base
    if index_kind == "lipp":
        base = 2 * math.ceil(math.log2(max(n, 2)))
        if op_kind == "lookup":
            return base
        if op_kind == "scan":
            return base + z
        return (2 + math.ceil(2 * n / rpb)) * math.ceil(math.log2(max(n, 2)))
    raise ValueError(index_kind)


# ---------------------------------------------------------------------------
# dataset + index construction


def resolve_dataset(spec: str, name: str | None = None) -> Dataset:
    """Either a key file path or "synthetic:DIST:k=v:..." (n, seed, ...)."""
    if not spec.startswith("synthetic:"):
        return load_sosd(spec, name)
    parts = spec.split(":")
    dist = parts[1]
    kw: dict = {}
    for p in parts[2:]:
        k, _, v = p.partition("=")
        kw[k] = float(v) if "." in v else int(v)
    n = int(kw.pop("n", 100000))
    seed = int(kw.pop("seed", 0))
    return gen_synthetic(dist, n, seed, **kw)


def build_index(config: RunConfig, workdir: str):
    buffer = BlockBuffer(config.buffer_capacity)
    cls = INDEXES[config.index]
    path = os.path.join(workdir, f"{config.index}.idx")
    return cls.create(
        path, config.block_size, buffer=buffer, fill=config.fill, eps=config.eps,
        buffer_size=config.buffer_size, density_lo=config.density_lo,
        density_hi=config.density_hi, rebuild_ratio=config.rebuild_ratio,
        layout=config.layout, data_target=config.data_target)


def _io_tuple(index) -> tuple[int, int, int]:
    st = index.io_stats()
    return st.blocks_read, st.blocks_written, st.buffer_hits


# ---------------------------------------------------------------------------
# replay engine


class _Agg:
    __slots__ = ("count", "reads", "writes", "hits", "costs",
                 "inner_reads", "leaf_reads")

    def __init__(self):
        self.count = 0
        self.reads = 0
        self.writes = 0
        self.hits = 0
        self.costs: list[int] = []
        self.inner_reads = 0
        self.leaf_reads = 0


def replay(index, ops, check_bounds=False, slack=BOUND_SLACK):
    """Execute an op stream; returns (per-op aggregates, phases, violations).

    With check_bounds, every lookup and scan asserts blocks_read against the
    analytic worst case for the index's live parameters (inserts have only
    amortised bounds and are exempt).
    """
    aggs: dict[str, _Agg] = {}
    phases: dict[str, dict] = {}
    violations: list[dict] = []
    op_arr, key_arr, arg_arr = ops.op, ops.key, ops.arg
    for i in range(len(op_arr)):
        code = int(op_arr[i])
        k = int(key_arr[i])
        r0, w0, h0 = _io_tuple(index)
        if code == OP_LOOKUP:
            index.lookup(k)
            z = 0
        elif code == OP_INSERT:
            index.insert(k, int(arg_arr[i]))
            z = 0
        else:
            z = int(arg_arr[i])
            index.scan(k, z)
        r1, w1, h1 = _io_tuple(index)
        name = OP_NAMES[code]
        agg = aggs.get(name)
        if agg is None:
            agg = aggs[name] = _Agg()
        dr = r1 - r0
        dw = w1 - w0
        agg.count += 1
        agg.reads += dr
        agg.writes += dw
        agg.hits += h1 - h0
        agg.costs.append(dr + dw)
        ctx = index.last_ctx
        if ctx is not None:
            for ph, v in ctx.reads_by_phase.items():
                phases.setdefault(ph, {"reads": 0, "writes": 0})["reads"] += v
            for ph, v in ctx.writes_by_phase.items():
                phases.setdefault(ph, {"reads": 0, "writes": 0})["writes"] += v
            agg.inner_reads += ctx.reads_by_category.get("inner", 0)
            agg.leaf_reads += ctx.reads_by_category.get("leaf", 0)
        if check_bounds and code != OP_INSERT:
            bound = cost_bound(index.kind, name, index.cost_params(), z)
            if dr > bound + slack:
                violations.append({"op": i, "kind": name, "key": k,
                                   "blocks_read": dr, "bound": bound})
    return aggs, phases, violations


def _finish_metrics(config: RunConfig, dataset, index, aggs, phases,
                    wall, bulk_wall) -> Metrics:
    per_op = {}
    for name, a in aggs.items():
        costs = np.array(a.costs, dtype=np.int64)
        per_op[name] = {
            "ops": a.count,
            "avg_blocks_read": a.reads / a.count,
            "avg_blocks_written": a.writes / a.count,
            "avg_buffer_hits": a.hits / a.count,
            "avg_inner_reads": a.inner_reads / a.count,
            "avg_leaf_reads": a.leaf_reads / a.count,
            "cost_p50": float(np.percentile(costs, 50)),
            "cost_p99": float(np.percentile(costs, 99)),
            "cost_max": int(costs.max()),
            "cost_std": float(costs.std()),
        }
    cfg = {
        "index": config.index,
        "workload": config.workload.kind,
        "ops": config.workload.op_count,
        "bulk": int(config.workload.bulkload_count or 0),
        "dataset": dataset.name,
        "block_size": config.block_size,
        "buffer": config.buffer_capacity,
        "hybrid": config.hybrid,
        "eps": config.eps,
        "seed": config.workload.seed,
    }
    return Metrics(cfg, per_op, phases, index.storage_bytes, index.pinned_bytes,
                   index.smo_count, wall, bulk_wall)


def run(config: RunConfig, dataset: Dataset | None = None,
        check_bounds: bool = False):
    """Build, bulk-load, replay, aggregate. Returns Metrics (and violations
    when check_bounds is set)."""
    if dataset is None:
        dataset = resolve_dataset(config.dataset)
    workload = make_workload(config.workload, dataset)
    own_dir = config.workdir is None
    workdir = config.workdir or tempfile.mkdtemp(prefix="diskidx-bench-")
    index = build_index(config, workdir)
    try:
        t0 = time.perf_counter()
        index.bulk_load(workload.bulk_keys, workload.bulk_payloads)
        bulk_wall = time.perf_counter() - t0
        if config.hybrid:
            index.enable_hybrid()
        index.reset_stats()
        index.smo_count = 0
        t0 = time.perf_counter()
        aggs, phases, violations = replay(index, workload.ops, check_bounds)
        wall = time.perf_counter() - t0
        metrics = _finish_metrics(config, dataset, index, aggs, phases, wall, bulk_wall)
    finally:
        index.close()
        if own_dir:
            import shutil
            shutil.rmtree(workdir, ignore_errors=True)
    if check_bounds:
        return metrics, violations
    return metrics


def verify_bounds(config: RunConfig, dataset: Dataset | None = None) -> dict:
    """Replay asserting per-operation reads against the analytic bounds."""
    metrics, violations = run(config, dataset, check_bounds=True)
    checked = sum(v["ops"] for k, v in metrics.per_op.items() if k != "insert")
    return {
        "config": metrics.config,
        "checked_ops": checked,
        "violations": violations,
        "ok": not violations,
    }


# ---------------------------------------------------------------------------
# reports

_COLUMNS = [
    "index", "workload", "dataset", "block_size", "buffer", "hybrid", "eps",
    "seed", "bulk", "op_kind", "ops", "avg_blocks_read", "avg_blocks_written",
    "avg_buffer_hits", "avg_inner_reads", "avg_leaf_reads", "cost_p50",
    "cost_p99", "cost_max", "cost_std", "storage_bytes", "pinned_bytes",
    "smo_count", "search_reads", "search_writes", "insert_reads",
    "insert_writes", "smo_reads", "smo_writes", "maintenance_reads",
    "maintenance_writes", "ops_per_sec",
]


def metrics_rows(metrics_list) -> list[dict]:
    rows = []
    for m in metrics_list:
        for kind, agg in sorted(m.per_op.items()):
            row = dict(m.config)
            row["op_kind"] = kind
            row.update({k: v for k, v in agg.items()})
            row["storage_bytes"] = m.storage_bytes
            row["pinned_bytes"] = m.pinned_bytes
            row["smo_count"] = m.smo_count
            for ph in ("search", "insert", "smo", "maintenance"):
                st = m.phases.get(ph, {"reads": 0, "writes": 0})
                row[f"{ph}_reads"] = st["reads"]
                row[f"{ph}_writes"] = st["writes"]
            total_ops = sum(a["ops"] for a in m.per_op.values())
            row["ops_per_sec"] = total_ops / m.wall_seconds if m.wall_seconds else 0.0
            rows.append({c: row.get(c, "") for c in _COLUMNS})
    return rows


def report(metrics_list, fmt: str = "csv") -> str:
    rows = metrics_rows(metrics_list)
    if fmt == "json":
        return json.dumps({"runs": rows}, indent=2)
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=_COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# CLI

_WORKLOAD_FLAGS = ["lookup", "scan", "write", "read-heavy", "write-heavy", "balanced"]


def _add_run_args(p):
    p.add_argument("--index", required=True, choices=sorted(INDEXES))
    p.add_argument("--workload", required=True, choices=_WORKLOAD_FLAGS)
    p.add_argument("--dataset", default="synthetic:uniform:n=100000")
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--buffer", type=int, default=0)
    p.add_argument("--hybrid", action="store_true")
    p.add_argument("--scale", type=float, default=0.01,
                   help="scale factor applied to the reference op counts")
    p.add_argument("--ops", type=int, default=None, help="override op count")
    p.add_argument("--bulk", type=int, default=None, help="override bulkload count")
    p.add_argument("--scan-length", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fill", type=float, default=0.8)
    p.add_argument("--epsilon", type=int, default=64)
    p.add_argument("--segment-buffer", type=int, default=256)
    p.add_argument("--layout", type=int, default=2, choices=(1, 2))
    p.add_argument("--rebuild-ratio", type=float, default=1.0)
    p.add_argument("--workdir", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", default="csv", choices=("csv", "json"))


def _config_from_args(args) -> RunConfig:
    dataset = resolve_dataset(args.dataset)
    n = dataset.size
    kind = args.workload
    if kind in ("lookup", "scan"):
        bulk = args.bulk if args.bulk is not None else n
        ops = args.ops if args.ops is not None else max(1, int(200_000 * args.scale))
    else:
        bulk = args.bulk if args.bulk is not None else min(n // 2, int(10_000_000 * args.scale))
        ops = args.ops if args.ops is not None else max(1, int(10_000_000 * args.scale))
    spec = WorkloadSpec(kind, bulkload_count=bulk, op_count=ops,
                        scan_length=args.scan_length, seed=args.seed)
    config = RunConfig(
        index=args.index, workload=spec, dataset=args.dataset,
        block_size=args.block_size, buffer_capacity=args.buffer,
        hybrid=args.hybrid, fill=args.fill, eps=args.epsilon,
        buffer_size=args.segment_buffer, layout=args.layout,
        rebuild_ratio=args.rebuild_ratio, seed=args.seed, workdir=args.workdir)
    return config, dataset


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bench",
                                 description="disk index benchmark harness")
    sub = ap.add_subparsers(dest="cmd", required=True)

    runp = sub.add_parser("run", help="run one (index, workload) cell")
    _add_run_args(runp)

    vb = sub.add_parser("verify-bounds", help="assert per-op reads against the cost bounds")
    _add_run_args(vb)

    prof = sub.add_parser("profile", help="dataset profiling table")
    prof.add_argument("--dataset", required=True)
    prof.add_argument("--errors", default="16,64,256,1024")
    prof.add_argument("--block-size", type=int, default=4096)
    prof.add_argument("--fill", type=float, default=0.8)
    prof.add_argument("--out", default=None)
    prof.add_argument("--format", default="json", choices=("csv", "json"))

    args = ap.parse_args(argv)

    if args.cmd == "profile":
        ds = resolve_dataset(args.dataset)
        eps_list = [int(e) for e in args.errors.split(",") if e]
        prof_out = profile(ds, eps_list, args.block_size, args.fill)
        if args.format == "json":
            _emit(json.dumps(prof_out, indent=2) + "\n", args.out)
        else:
            buf = io.StringIO()
            w = csv.writer(buf)
            w.writerow(["dataset", "keys", "metric", "value"])
            for eps, c in prof_out["segments"].items():
                w.writerow([prof_out["dataset"], prof_out["keys"], f"segments_eps{eps}", c])
            w.writerow([prof_out["dataset"], prof_out["keys"], "conflict_degree",
                        prof_out["conflict_degree"]])
            w.writerow([prof_out["dataset"], prof_out["keys"], "bptree_leaves",
                        prof_out["bptree_leaves"]])
            _emit(buf.getvalue(), args.out)
        return 0

    config, dataset = _config_from_args(args)
    if args.cmd == "run":
        metrics = run(config, dataset)
        _emit(report([metrics], args.format), args.out)
        return 0

    result = verify_bounds(config, dataset)
    _emit(json.dumps(result, indent=2) + "\n", args.out)
    return 0 if result["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
