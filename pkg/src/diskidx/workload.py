"""Datasets, profiling, and deterministic workload generation.

Datasets are sorted unique u64 key sets, either read from the standard
binary format (u64 little-endian count, then that many u64 keys) or
generated synthetically. Payloads are always key + 1, applied when records
are materialised.

A workload is a bulk-load key set plus a deterministic operation stream.
Mixed streams interleave in fixed cycles of twenty operations (inserts
first, then lookups), so the stated ratios hold exactly over every full
cycle. Lookup targets are sampled uniformly from the keys present at the
moment the operation executes; insert keys come from the held-out part of
the dataset, so they are absent until issued.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .blockstore import KEY_SENTINEL
from .model import optimal_pla, fmcd_fit

OP_LOOKUP = 1
OP_INSERT = 2
OP_SCAN = 3

KINDS = ("lookup", "scan", "write", "read-heavy", "write-heavy", "balanced")

# (inserts, lookups) per cycle of 20 operations
_CYCLES = {
    "read-heavy": (2, 18),
    "write-heavy": (18, 2),
    "balanced": (10, 10),
}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    keys: np.ndarray  # sorted unique u64

    @property
    def size(self) -> int:
        return int(self.keys.size)

    def payloads(self, keys=None) -> np.ndarray:
        keys = self.keys if keys is None else keys
        return keys + np.uint64(1)


def load_sosd(path, name=None) -> Dataset:
    """Binary key file: u64 count header, then count u64 keys (LE)."""
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise DatasetError(f"{path}: truncated header")
        (count,) = struct.unpack("<Q", head)
        keys = np.fromfile(f, dtype="<u8", count=count)
    if keys.size != count:
        raise DatasetError(f"{path}: expected {count} keys, found {keys.size}")
    keys = np.unique(keys)
    if keys.size and int(keys[-1]) == KEY_SENTINEL:
        keys = keys[:-1]
    return Dataset(name or str(path), keys)


def write_sosd(path, keys) -> None:
    keys = np.asarray(keys, dtype="<u8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", keys.size))
        keys.tofile(f)


def gen_synthetic(dist: str, n: int, seed: int, **params) -> Dataset:
    """Deterministic synthetic key sets: uniform, lognormal, segmented-linear."""
    rng = np.random.default_rng(seed)
    if dist == "uniform":
        keys = np.empty(0, dtype=np.uint64)
        while keys.size < n:
            extra = rng.integers(0, KEY_SENTINEL, size=int((n - keys.size) * 1.1) + 16,
                                 dtype=np.uint64)
            keys = np.unique(np.concatenate([keys, extra]))
        keys = keys[:n]
    elif dist == "lognormal":
        sigma = params.get("sigma", 2.0)
        keys = np.empty(0, dtype=np.uint64)
        while keys.size < n:
            m = int((n - keys.size) * 1.2) + 16
            vals = rng.lognormal(mean=0.0, sigma=sigma, size=m) * 2.0**40
            vals = vals[vals < 2.0**62].astype(np.uint64)
            keys = np.unique(np.concatenate([keys, vals]))
        keys = keys[:n]
    elif dist == "segmented-linear":
        pieces = int(params.get("pieces", 16))
        noise = int(params.get("noise", 0))
        per = [n // pieces] * pieces
        for i in range(n - sum(per)):
            per[i] += 1
        chunks = []
        base = np.uint64(rng.integers(0, 2**30))
        for ln in per:
            step = int(rng.integers(2 * noise + 1, 2 * noise + 1000))
            ks = base + np.arange(ln, dtype=np.uint64) * np.uint64(step)
            if noise:
                ks = ks + rng.integers(0, noise + 1, size=ln).astype(np.uint64)
            chunks.append(ks)
            base = ks[-1] + np.uint64(int(rng.integers(10**6, 10**8)))
        keys = np.unique(np.concatenate(chunks))[:n]
    else:
        raise DatasetError(f"unknown synthetic distribution {dist!r}")
    return Dataset(f"{dist}-{n}-{seed}", keys)


# ---------------------------------------------------------------------------
# profiling


def bptree_leaf_count(n: int, block_size: int = 4096, fill: float = 0.8) -> int:
    cap = (block_size - 24) // 16
    per_leaf = max(1, int(np.ceil(fill * cap)))
    return int(np.ceil(n / per_leaf)) if n else 0


def profile(dataset: Dataset, eps_list, block_size: int = 4096, fill: float = 0.8) -> dict:
    """Segment counts per error bound, root conflict degree, leaf count."""
    from .lipp import _alloc_slots

    seg = {}
    for eps in eps_list:
        seg[int(eps)] = len(optimal_pla(dataset.keys, int(eps)))
    n = dataset.size
    if n:
        _, degree = fmcd_fit(dataset.keys, _alloc_slots(n))
    else:
        degree = 0
    return {
        "dataset": dataset.name,
        "keys": n,
        "segments": seg,
        "conflict_degree": degree,
        "bptree_leaves": bptree_leaf_count(n, block_size, fill),
    }


# ---------------------------------------------------------------------------
# workloads


@dataclass
class WorkloadSpec:
    kind: str
    bulkload_count: int | None = None
    op_count: int = 0
    scan_length: int = 100  # a lookup on the start key plus the next 99
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")


@dataclass
class OpStream:
    """Deterministic op sequence as parallel arrays."""

    op: np.ndarray    # u8 opcodes
    key: np.ndarray   # u64
    arg: np.ndarray   # u64 payload (insert) or scan length (scan), else 0

    def __len__(self):
        return int(self.op.size)

    def encode(self) -> bytes:
        out = bytearray()
        for i in range(self.op.size):
            code = int(self.op[i])
            if code == OP_LOOKUP:
                out += struct.pack("<BQ", code, int(self.key[i]))
            elif code == OP_INSERT:
                out += struct.pack("<BQQ", code, int(self.key[i]), int(self.arg[i]))
            else:
                out += struct.pack("<BQI", code, int(self.key[i]), int(self.arg[i]))
        return bytes(out)

    @classmethod
    def decode(cls, raw: bytes) -> "OpStream":
        ops, keys, args = [], [], []
        pos = 0
        while pos < len(raw):
            code = raw[pos]
            pos += 1
            if code == OP_LOOKUP:
                (k,) = struct.unpack_from("<Q", raw, pos)
                pos += 8
                a = 0
            elif code == OP_INSERT:
                k, a = struct.unpack_from("<QQ", raw, pos)
                pos += 16
            elif code == OP_SCAN:
                k, a = struct.unpack_from("<QI", raw, pos)
                pos += 12
            else:
                raise DatasetError(f"bad opcode {code} at offset {pos - 1}")
            ops.append(code)
            keys.append(k)
            args.append(a)
        return cls(np.array(ops, dtype=np.uint8), np.array(keys, dtype=np.uint64),
                   np.array(args, dtype=np.uint64))


@dataclass
class Workload:
    spec: WorkloadSpec
    bulk_keys: np.ndarray
    bulk_payloads: np.ndarray
    ops: OpStream


def make_workload(spec: WorkloadSpec, dataset: Dataset) -> Workload:
    rng = np.random.default_rng(spec.seed)
    n = dataset.size
    kind = spec.kind
    read_only = kind in ("lookup", "scan")
    bulk_count = spec.bulkload_count
    if bulk_count is None:
        bulk_count = n if read_only else n // 2
    if bulk_count > n:
        raise DatasetError(f"bulkload_count {bulk_count} exceeds dataset size {n}")

    if kind == "write":
        inserts_needed = spec.op_count
    elif kind in _CYCLES:
        w, r = _CYCLES[kind]
        cycles = spec.op_count // 20
        inserts_needed = cycles * w + min(spec.op_count % 20, w)
    else:
        inserts_needed = 0
    if bulk_count + inserts_needed > n:
        raise DatasetError(
            f"dataset too small: need {bulk_count} bulk + {inserts_needed} insert keys, have {n}")

    if bulk_count == n:
        bulk_idx = np.arange(n)
        held = np.empty(0, dtype=np.int64)
    else:
        perm = rng.permutation(n)
        bulk_idx = np.sort(perm[:bulk_count])
        held = perm[bulk_count:]
    bulk_keys = dataset.keys[bulk_idx]
    insert_keys = dataset.keys[held[:inserts_needed]] if inserts_needed else \
        np.empty(0, dtype=np.uint64)

    m = spec.op_count
    op = np.empty(m, dtype=np.uint8)
    key = np.zeros(m, dtype=np.uint64)
    arg = np.zeros(m, dtype=np.uint64)

    if kind == "lookup" or kind == "scan":
        idx = rng.integers(0, bulk_count, size=m)
        key[:] = bulk_keys[idx]
        if kind == "lookup":
            op[:] = OP_LOOKUP
        else:
            op[:] = OP_SCAN
            arg[:] = spec.scan_length
    elif kind == "write":
        op[:] = OP_INSERT
        key[:] = insert_keys
        arg[:] = insert_keys + np.uint64(1)
    else:
        w, r = _CYCLES[kind]
        t = np.arange(m)
        phase = t % 20
        is_insert = phase < w
        op[:] = np.where(is_insert, OP_INSERT, OP_LOOKUP)
        ins_pos = np.flatnonzero(is_insert)
        key[ins_pos] = insert_keys[:ins_pos.size]
        arg[ins_pos] = insert_keys[:ins_pos.size] + np.uint64(1)
        # lookups sample uniformly from keys present at issue time
        issued_before = (t // 20) * w + np.minimum(phase, w)
        look_pos = np.flatnonzero(~is_insert)
        present = bulk_count + issued_before[look_pos]
        u = (rng.random(look_pos.size) * present).astype(np.int64)
        from_bulk = u < bulk_count
        lk = np.empty(look_pos.size, dtype=np.uint64)
        lk[from_bulk] = bulk_keys[u[from_bulk]]
        lk[~from_bulk] = insert_keys[u[~from_bulk] - bulk_count]
        key[look_pos] = lk
    ops = OpStream(op, key, arg)
    return Workload(spec, bulk_keys, dataset.payloads(bulk_keys), ops)
