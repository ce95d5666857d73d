"""Dynamic disk PGM: an LSM hierarchy of immutable static runs.

Each static run is its own file: leaf record blocks followed by the
segmentation levels built bottom-up (segments over records, then segments
over segment first-keys, and so on until a single root entry, which lives
in the run's meta block). A small sorted insert array in the principal file
absorbs writes; when it fills, it is merged with the occupied run slots in
cascade, so occupied slot capacities follow a binary counter in units of
the array capacity. Merged-away run files are deleted - this is the one
index that reclaims space.

Level entry (40 bytes): first_key(u64) | slope(f64) | intercept(f64) |
child_start(u64) | count(u32) | pad. Entries never straddle blocks.

Lookups probe the insert array first, then runs newest to oldest, so an
upserted key shadows its older versions before any merge happens.
"""

from __future__ import annotations

import heapq
import math
import struct

import numpy as np

from .base import DiskIndex, as_u64
from .blockstore import (
    KEY_SENTINEL,
    KIND_PGM,
    KIND_PGM_RUN,
    BlockBuffer,
    BlockStore,
    IoStats,
    OpContext,
)
from .model import InputError, optimal_pla

_ENTRY_DT = np.dtype([("key", "<u8"), ("slope", "<f8"), ("icpt", "<f8"),
                      ("child", "<u8"), ("count", "<u4"), ("pad", "<u4")])
_ENTRY_SIZE = 40
_RUN_META = struct.Struct("<QQQII")  # count, min_key, max_key, eps, nlevels
_LEVEL = struct.Struct("<QQ")        # start block, entry count


def _c0_for(block_size: int) -> int:
    # 585 records (3 blocks) at 4 KB; scales linearly with the block size
    return (585 * block_size) // 4096


class StaticRun:
    """One immutable sorted run with its recursive segmentation levels.

    Every level lives on disk, including the single-entry top level: the
    meta block holds only bookkeeping (counts, key range, level table), so
    a probe pays one block read per level plus the leaf window.
    """

    def __init__(self, store: BlockStore):
        self.store = store
        raw = store.meta_extra
        self.count, self.min_key, self.max_key, self.eps, nlevels = _RUN_META.unpack_from(raw, 0)
        off = _RUN_META.size
        self.levels = []  # bottom-up: [(start_block, count), ...]
        for _ in range(nlevels):
            self.levels.append(_LEVEL.unpack_from(raw, off))
            off += _LEVEL.size
        self.rec_per_block = store.block_size // 16
        self.ent_per_block = store.block_size // _ENTRY_SIZE

    # ------------------------------------------------------------------

    @classmethod
    def build(cls, path, records: np.ndarray, eps: int, block_size: int,
              buffer=None, ctx: OpContext | None = None) -> "StaticRun":
        store = BlockStore.create(path, block_size, buffer=buffer, kind=KIND_PGM_RUN)
        write = store.write_block if ctx is None else (lambda b, d: ctx.write(store, b, d))
        bs = block_size
        n = records.shape[0]
        rec_per_block = bs // 16
        nblocks = math.ceil(n / rec_per_block)
        first = store.allocate(nblocks)
        raw = np.ascontiguousarray(records, dtype="<u8").tobytes()
        for i in range(nblocks):
            chunk = raw[i * rec_per_block * 16:(i + 1) * rec_per_block * 16]
            write(first + i, chunk + bytes(bs - len(chunk)))

        levels = []
        keys = records[:, 0]
        ent_per_block = bs // _ENTRY_SIZE
        while True:
            specs = optimal_pla(keys, eps)
            ents = np.zeros(len(specs), dtype=_ENTRY_DT)
            pos = 0
            for i, s in enumerate(specs):
                ents[i]["key"] = s.first_key
                ents[i]["slope"] = s.model.slope
                ents[i]["icpt"] = s.model.intercept
                ents[i]["child"] = pos  # first covered index in the level below
                ents[i]["count"] = s.count
                pos += s.count
            nb = math.ceil(len(specs) / ent_per_block)
            base = store.allocate(nb)
            raw = ents.tobytes()
            per = ent_per_block * _ENTRY_SIZE
            for i in range(nb):
                chunk = raw[i * per:(i + 1) * per]
                write(base + i, chunk + bytes(bs - len(chunk)))
            levels.append((base, len(specs)))
            if len(specs) == 1:
                break
            keys = ents["key"]
        meta = _RUN_META.pack(n, int(records[0, 0]), int(records[-1, 0]), eps, len(levels))
        for lv in levels:
            meta += _LEVEL.pack(*lv)
        store.meta_extra = meta
        store.flush_meta()
        return cls(store)

    # ------------------------------------------------------------------

    def _read_entries(self, ctx, level, lo, hi) -> np.ndarray:
        start_block, _ = self.levels[level]
        b0 = lo // self.ent_per_block
        b1 = (hi - 1) // self.ent_per_block
        per = self.ent_per_block
        parts = []
        for b in range(b0, b1 + 1):
            data = ctx.read(self.store, start_block + b)
            s = lo - b * per if b == b0 else 0
            e = hi - b * per if b == b1 else per
            parts.append(np.frombuffer(data, dtype=_ENTRY_DT, count=e - s,
                                       offset=s * _ENTRY_SIZE))
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def _read_records(self, ctx, lo, hi) -> np.ndarray:
        per = self.rec_per_block
        b0 = lo // per
        b1 = (hi - 1) // per
        parts = []
        for b in range(b0, b1 + 1):
            data = ctx.read(self.store, 1 + b)
            s = lo - b * per if b == b0 else 0
            e = hi - b * per if b == b1 else per
            parts.append(np.frombuffer(data, dtype="<u8", count=2 * (e - s),
                                       offset=16 * s).reshape(-1, 2))
        return parts[0] if len(parts) == 1 else np.vstack(parts)

    def _descend(self, key, ctx) -> int:
        """Rank of the first leaf record >= key (may equal count)."""
        kd = np.uint64(key)
        ctx.category = "inner"
        top = len(self.levels) - 1
        ent = self._read_entries(ctx, top, 0, 1)[0]  # single-entry top level
        for level in range(top - 1, -1, -1):
            local = int(np.floor(float(ent["slope"]) * float(key) + float(ent["icpt"])))
            local = min(max(local, 0), int(ent["count"]) - 1)
            base = int(ent["child"])
            lo = base + max(local - self.eps, 0)
            hi = base + min(local + self.eps + 1, int(ent["count"]))
            ents = self._read_entries(ctx, level, lo, hi)
            idx = int(np.searchsorted(ents["key"], kd, side="right")) - 1
            if idx < 0:
                idx = 0
            ent = ents[idx]
        ctx.category = "leaf"
        local = int(np.floor(float(ent["slope"]) * float(key) + float(ent["icpt"])))
        local = min(max(local, 0), int(ent["count"]) - 1)
        base = int(ent["child"])
        lo = base + max(local - self.eps, 0)
        hi = base + min(local + self.eps + 1, int(ent["count"]))
        recs = self._read_records(ctx, lo, hi)
        idx = int(np.searchsorted(recs[:, 0], kd, side="left"))
        return lo + idx, recs, lo

    def lookup(self, key: int, ctx) -> int | None:
        if self.count == 0 or key < self.min_key or key > self.max_key:
            return None
        rank, recs, lo = self._descend(key, ctx)
        i = rank - lo
        if i < recs.shape[0] and int(recs[i, 0]) == key:
            return int(recs[i, 1])
        return None

    def start_rank(self, key: int, ctx) -> int:
        if self.count == 0 or key > self.max_key:
            return self.count
        if key <= self.min_key:
            return 0
        rank, _, _ = self._descend(key, ctx)
        return rank

    def records_from(self, rank: int, ctx):
        """Yield (key, payload) from ``rank`` onward, one block at a time."""
        per = self.rec_per_block
        while rank < self.count:
            hi = min(self.count, (rank // per + 1) * per)
            ctx.category = "leaf"
            recs = self._read_records(ctx, rank, hi)
            for i in range(recs.shape[0]):
                yield int(recs[i, 0]), int(recs[i, 1])
            rank = hi

    def read_all(self, ctx) -> np.ndarray:
        ctx.category = "leaf"
        if self.count == 0:
            return np.empty((0, 2), dtype=np.uint64)
        return self._read_records(ctx, 0, self.count)

    def pin_levels(self) -> None:
        for start, count in self.levels:
            nb = math.ceil(count / self.ent_per_block)
            self.store.pin_blocks(range(start, start + nb))

    @property
    def height(self) -> int:
        return len(self.levels) + 1


class PgmIndex(DiskIndex):
    kind = "pgm"
    _META = struct.Struct("<IIQIQ")  # c0, eps, generation, array_count, total

    def __init__(self, store: BlockStore, eps: int = 64, buffer=None):
        super().__init__()
        self.store = store
        self.buffer = buffer
        self.retired = IoStats()
        bs = store.block_size
        if store.meta_extra:
            raw = store.meta_extra
            self.c0, self.eps, self.generation, self.array_count, self.total = \
                self._META.unpack_from(raw, 0)
            off = self._META.size
            (nruns,) = struct.unpack_from("<I", raw, off)
            off += 4
            self.runs: dict[int, tuple[int, StaticRun]] = {}
            for _ in range(nruns):
                slot, gen = struct.unpack_from("<IQ", raw, off)
                off += 12
                rs = BlockStore.open(self._run_path(slot, gen), bs, buffer=buffer,
                                     kind=KIND_PGM_RUN)
                self.runs[slot] = (gen, StaticRun(rs))
        else:
            self.c0 = _c0_for(bs)
            self.eps = eps
            self.generation = 0
            self.array_count = 0
            self.total = 0
            self.runs = {}
            store.allocate(math.ceil(self.c0 * 16 / bs))
        self.array_first = 1  # array blocks directly follow the meta block
        self.array_blocks = math.ceil(self.c0 * 16 / bs)
        self.rec_per_block = bs // 16

    # ------------------------------------------------------------------

    @classmethod
    def create(cls, path, block_size=4096, buffer=None, eps=64, **_):
        store = BlockStore.create(path, block_size, buffer=buffer, kind=KIND_PGM)
        return cls(store, eps, buffer)

    @classmethod
    def open(cls, path, block_size=4096, buffer=None, **_):
        store = BlockStore.open(path, block_size, buffer=buffer, kind=KIND_PGM)
        return cls(store, buffer=buffer)

    def _run_path(self, slot: int, gen: int) -> str:
        return f"{self.store.path}.run{slot}.{gen}"

    def stores(self):
        return [self.store] + [run.store for _, run in self.runs.values()]

    def io_stats(self):
        total = super().io_stats()
        total.blocks_read += self.retired.blocks_read
        total.blocks_written += self.retired.blocks_written
        total.buffer_hits += self.retired.buffer_hits
        return total

    def reset_stats(self):
        super().reset_stats()
        self.retired = IoStats()

    def flush(self):
        meta = self._META.pack(self.c0, self.eps, self.generation,
                               self.array_count, self.total)
        meta += struct.pack("<I", len(self.runs))
        for slot, (gen, _) in sorted(self.runs.items()):
            meta += struct.pack("<IQ", slot, gen)
        self.store.meta_extra = meta
        for s in self.stores():
            s.flush_meta()

    def close(self):
        self.flush()
        for s in self.stores():
            s.close()

    # ------------------------------------------------------------------
    # insert array helpers (physically sorted; shifts write back in place)

    def _array_read(self, ctx, lo, hi) -> np.ndarray:
        per = self.rec_per_block
        b0 = lo // per
        b1 = (hi - 1) // per
        parts = []
        for b in range(b0, b1 + 1):
            data = ctx.read(self.store, self.array_first + b)
            s = lo - b * per if b == b0 else 0
            e = hi - b * per if b == b1 else per
            parts.append(np.frombuffer(data, dtype="<u8", count=2 * (e - s),
                                       offset=16 * s).reshape(-1, 2))
        return parts[0] if len(parts) == 1 else np.vstack(parts)

    def _array_find(self, key, ctx):
        """Block-at-a-time walk to the insertion position."""
        kd = np.uint64(key)
        per = self.rec_per_block
        n = self.array_count
        for b in range(math.ceil(n / per)):
            lo = b * per
            hi = min(n, lo + per)
            recs = self._array_read(ctx, lo, hi)
            if int(recs[-1, 0]) >= key or hi == n:
                i = int(np.searchsorted(recs[:, 0], kd, side="left"))
                found = i < recs.shape[0] and int(recs[i, 0]) == key
                return lo + i, found
        return n, False

    def _array_upsert(self, ctx, pos, payload):
        per = self.rec_per_block
        b = pos // per
        data = bytearray(ctx.read(self.store, self.array_first + b))
        struct.pack_into("<Q", data, (pos - b * per) * 16 + 8, payload)
        ctx.write(self.store, self.array_first + b, bytes(data))

    def _array_splice(self, ctx, pos, key, payload):
        """Insert at ``pos``; rewrites the blocks from pos to the new tail."""
        n = self.array_count
        per = self.rec_per_block
        b0 = pos // per
        base = b0 * per
        tail = self._array_read(ctx, base, n) if n > base else np.empty((0, 2), np.uint64)
        i = pos - base
        new = np.vstack([tail[:i], np.array([[key, payload]], dtype=np.uint64), tail[i:]])
        bs = self.store.block_size
        for b in range(b0, n // per + 1):
            s = b * per - base
            e = min(new.shape[0], s + per)
            raw = np.ascontiguousarray(new[s:e], dtype="<u8").tobytes()
            ctx.write(self.store, self.array_first + b, raw + bytes(bs - len(raw)))

    # ------------------------------------------------------------------

    def bulk_load(self, keys, payloads):
        keys = as_u64(keys)
        payloads = as_u64(payloads)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InputError("bulk load requires strictly increasing keys")
        self.total = int(keys.size)
        if keys.size == 0:
            self.flush()
            return
        records = np.column_stack([keys, payloads])
        run = StaticRun.build(self._run_path(0, self.generation), records, self.eps,
                              self.store.block_size, self.buffer)
        self.runs[0] = (self.generation, run)
        self.generation += 1
        if self.hybrid:
            run.pin_levels()
        self.flush()

    def lookup(self, key: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        ctx.category = "leaf"
        if self.array_count > 0:
            pos, found = self._array_find(key, ctx)
            if found:
                return int(self._array_read(ctx, pos, pos + 1)[0, 1])
        for slot in self._newest_first():
            hit = self.runs[slot][1].lookup(key, ctx)
            if hit is not None:
                return hit
        return None

    def _newest_first(self):
        return sorted(self.runs, key=lambda s: -self.runs[s][0])

    def insert(self, key: int, payload: int):
        if key == KEY_SENTINEL:
            raise ValueError("the maximum u64 value is reserved")
        ctx = self.begin_op()
        ctx.phase = "search"
        ctx.category = "leaf"
        if self.array_count > 0:
            pos, found = self._array_find(key, ctx)
        else:
            pos, found = 0, False
        if found:
            ctx.phase = "insert"
            self._array_upsert(ctx, pos, payload)
            return
        if self.array_count >= self.c0:
            ctx.phase = "smo"
            self._merge(ctx)
            pos = 0
        ctx.phase = "insert"
        self._array_splice(ctx, pos, key, payload)
        self.array_count += 1
        self.total += 1

    def _merge(self, ctx):
        """Insert-array overflow: cascade-merge into the first free slot."""
        self.smo_count += 1
        sources = []
        arr = self._array_read(ctx, 0, self.array_count)
        sources.append(np.ascontiguousarray(arr))
        slot = 0
        merged_slots = []
        while slot in self.runs:
            merged_slots.append(slot)
            slot += 1
        # newest first: the array, then runs from newest to oldest generation
        for s in sorted(merged_slots, key=lambda s: -self.runs[s][0]):
            sources.append(self.runs[s][1].read_all(ctx))
        allrec = np.vstack(sources)
        order = np.argsort(allrec[:, 0], kind="stable")
        srt = allrec[order]
        keep = np.ones(srt.shape[0], dtype=bool)
        keep[1:] = srt[1:, 0] != srt[:-1, 0]
        merged = srt[keep]
        run = StaticRun.build(self._run_path(slot, self.generation), merged, self.eps,
                              self.store.block_size, self.buffer, ctx=ctx)
        for s in merged_slots:
            gen, old = self.runs.pop(s)
            st = old.store.stats
            self.retired.blocks_read += st.blocks_read
            self.retired.blocks_written += st.blocks_written
            self.retired.buffer_hits += st.buffer_hits
            old.store.delete()
        self.runs[slot] = (self.generation, run)
        self.generation += 1
        if self.hybrid:
            run.pin_levels()
        self.array_count = 0
        self.total = sum(r.count for _, r in self.runs.values())
        self.flush()

    def scan(self, start_key: int, count: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        ctx.category = "leaf"
        out: list[tuple[int, int]] = []
        if count < 1:
            return out
        streams = []
        if self.array_count > 0:
            arr = self._array_read(ctx, 0, self.array_count)
            idx = int(np.searchsorted(arr[:, 0], np.uint64(start_key)))
            it = iter([(int(arr[i, 0]), int(arr[i, 1])) for i in range(idx, arr.shape[0])])
            streams.append((0, it))
        for pri, slot in enumerate(self._newest_first(), start=1):
            run = self.runs[slot][1]
            rank = run.start_rank(start_key, ctx)
            streams.append((pri, run.records_from(rank, ctx)))
        heap = []
        for pri, it in streams:
            first = next(it, None)
            if first is not None:
                heapq.heappush(heap, (first[0], pri, first[1], it))
        last_key = None
        while heap and len(out) < count:
            k, pri, v, it = heapq.heappop(heap)
            if k != last_key:
                out.append((k, v))
                last_key = k
            nxt = next(it, None)
            if nxt is not None:
                heapq.heappush(heap, (nxt[0], pri, nxt[1], it))
        return out

    # ------------------------------------------------------------------

    def enable_hybrid(self):
        self.hybrid = True
        for _, run in self.runs.values():
            run.pin_levels()

    def cost_params(self):
        return {
            "n": max(self.total, 1),
            "rec_per_block": self.rec_per_block,
            "eps": self.eps,
            "array_blocks": self.array_blocks,
            "run_counts": [run.count for _, run in self.runs.values()],
        }

    def occupied_slots(self) -> list[int]:
        return sorted(self.runs)
