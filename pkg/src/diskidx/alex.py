"""Disk ALEX: model-routed inner nodes over gapped-array data nodes.

Inner nodes are tiny (a linear model plus a child-pointer array, at most 256
children) and are packed several to a block; routing reads one block per
level and never searches. Data nodes are contiguous chunks: a header block,
bitmap block(s) marking live slots, then the gapped record array. Empty
slots duplicate their successor record so searches never touch the bitmap;
slots after the last live record hold sentinel keys. The bitmap serves
inserts (gap finding) and scans (skipping copies).

Two file layouts: layout 2 (default) keeps inner nodes and data nodes in
separate files so a root-to-leaf path can traverse several inner nodes in
one fetched block; layout 1 interleaves everything in one file.

Child addresses are tagged u64s: bit 63 set means the child is a data node.

Data node header (48 bytes): slope(f64) | intercept(f64) | capacity(u32) |
count(u32) | density_lo(f32) | density_hi(f32) | bitmap_blocks(u32) |
num_inserts(u32) | num_shifts(u32) | pad.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .base import DiskIndex, as_u64
from .blockstore import (
    KEY_SENTINEL,
    KIND_ALEX_DATA,
    KIND_ALEX_INNER,
    BlockStore,
    OpContext,
)
from .model import InputError

_DHDR = struct.Struct("<ddIIffIII4x")  # 48 bytes
_IHDR = struct.Struct("<BxHxxxxdd")    # 24 bytes
_META = struct.Struct("<QIffQQQII")

_DATA_TAG = 1 << 63


def _tag_data(blk: int) -> int:
    return (blk << 32) | _DATA_TAG


def _tag_inner(blk: int, off: int) -> int:
    return (blk << 32) | off


def _untag(addr: int) -> tuple[bool, int, int]:
    return bool(addr >> 63), (addr >> 32) & 0x7FFFFFFF, addr & 0xFFFFFFFF


def _ls_fit(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    xm = xs.mean()
    ym = ys.mean()
    var = float(np.sum((xs - xm) ** 2))
    if var <= 0.0:
        return 0.0, float(ym)
    slope = float(np.sum((xs - xm) * (ys - ym)) / var)
    return slope, float(ym - slope * xm)


class AlexIndex(DiskIndex):
    kind = "alex"

    def __init__(self, inner_store: BlockStore, data_store: BlockStore,
                 layout: int, data_target: int = 1024,
                 density_lo: float = 0.6, density_hi: float = 0.8,
                 max_node_bytes: int = 16 << 20):
        super().__init__()
        self.inner_store = inner_store
        self.data_store = data_store
        self.layout = layout
        self.data_target = data_target
        self.density_lo = density_lo
        self.density_hi = density_hi
        self.max_node_bytes = max_node_bytes
        bs = inner_store.block_size
        self.spb = bs // 16          # record slots per block
        self.bpb = bs * 8            # bitmap bits per block
        self.count = 0
        self.max_cap = 1
        self.n_data = 0
        self.height = 1
        self._pack_blk = -1
        self._pack_off = bs
        if inner_store.meta_extra:
            (self.count, self.data_target, self.density_lo, self.density_hi,
             self.max_node_bytes, self.max_cap, self.n_data, self.height,
             self.layout) = _META.unpack(inner_store.meta_extra)

    # ------------------------------------------------------------------

    @classmethod
    def create(cls, path, block_size=4096, buffer=None, layout=2,
               data_target=1024, density_lo=0.6, density_hi=0.8,
               max_node_bytes=16 << 20, **_):
        path = str(path)
        if layout == 2:
            inner = BlockStore.create(path + ".inner", block_size, buffer=buffer,
                                      kind=KIND_ALEX_INNER)
            data = BlockStore.create(path + ".data", block_size, buffer=buffer,
                                     kind=KIND_ALEX_DATA)
        else:
            inner = BlockStore.create(path, block_size, buffer=buffer,
                                      kind=KIND_ALEX_INNER)
            data = inner
        return cls(inner, data, layout, data_target, density_lo, density_hi,
                   max_node_bytes)

    @classmethod
    def open(cls, path, block_size=4096, buffer=None, layout=2, **_):
        path = str(path)
        if layout == 2:
            inner = BlockStore.open(path + ".inner", block_size, buffer=buffer,
                                    kind=KIND_ALEX_INNER)
            data = BlockStore.open(path + ".data", block_size, buffer=buffer,
                                   kind=KIND_ALEX_DATA)
        else:
            inner = BlockStore.open(path, block_size, buffer=buffer,
                                    kind=KIND_ALEX_INNER)
            data = inner
        return cls(inner, data, layout)

    def stores(self):
        if self.layout == 2:
            return [self.inner_store, self.data_store]
        return [self.inner_store]

    def flush(self):
        self.inner_store.meta_extra = _META.pack(
            self.count, self.data_target, self.density_lo, self.density_hi,
            self.max_node_bytes, self.max_cap, self.n_data, self.height, self.layout)
        super().flush()

    def close(self):
        self.flush()
        for s in self.stores():
            s.close()

    # ------------------------------------------------------------------
    # node construction

    def _reserve_inner(self, size: int) -> tuple[int, int]:
        bs = self.inner_store.block_size
        if self._pack_off + size > bs:
            self._pack_blk = self.inner_store.allocate()
            self._pack_off = 0
        spot = (self._pack_blk, self._pack_off)
        self._pack_off += size
        return spot

    def _write_inner(self, blk, off, fanout, slope, icpt, children, ctx=None):
        store = self.inner_store
        data = bytearray(ctx.read(store, blk) if ctx is not None else store.peek_block(blk))
        _IHDR.pack_into(data, off, 1, fanout, slope, icpt)
        data[off + 24:off + 24 + 8 * fanout] = np.asarray(children, dtype="<u8").tobytes()
        if ctx is not None:
            ctx.write(store, blk, bytes(data))
        else:
            store.write_block(blk, bytes(data))

    def _read_inner(self, blk, off, ctx):
        ctx.category = "inner"
        data = ctx.read(self.inner_store, blk)
        kind, fanout, slope, icpt = _IHDR.unpack_from(data, off)
        children = np.frombuffer(data, dtype="<u8", count=fanout, offset=off + 24)
        return fanout, slope, icpt, children

    def _node_blocks(self, cap: int) -> tuple[int, int]:
        bb = math.ceil(cap / self.bpb)
        sb = math.ceil(cap / self.spb)
        return bb, 1 + bb + sb

    def _capacity_for(self, n: int) -> int:
        cap = max(math.ceil(n / self.density_lo), 8)
        return math.ceil(cap / self.spb) * self.spb

    def _write_data_node(self, records: np.ndarray, cap: int, ctx=None) -> int:
        """Model-based placement of sorted records into a fresh chunk."""
        store = self.data_store
        bs = store.block_size
        n = records.shape[0]
        bb, total = self._node_blocks(cap)
        chunk = store.allocate(total)
        keys = records[:, 0].astype(np.float64)
        if n > 1:
            slope, icpt = _ls_fit(keys, np.arange(n, dtype=np.float64) * ((cap - 1) / (n - 1)))
        else:
            slope, icpt = 0.0, 0.0
        pred = np.clip(np.floor(slope * keys + icpt), 0, cap - 1).astype(np.int64)
        idx = np.arange(n, dtype=np.int64)
        slots = np.maximum.accumulate(pred - idx) + idx       # strictly increasing
        slots = np.minimum(slots, cap - n + idx)              # keep room for the tail
        # gapped array: every slot holds its successor's record, trailing
        # slots hold sentinels, so searches never consult the bitmap
        full = np.full((cap, 2), KEY_SENTINEL, dtype=np.uint64)
        src = np.searchsorted(slots, np.arange(cap), side="left")
        inside = src < n
        full[inside] = records[src[inside]]
        mask = np.zeros(cap, dtype=np.uint8)
        mask[slots] = 1
        write = store.write_block if ctx is None else (lambda b, d: ctx.write(store, b, d))
        hdr = bytearray(bs)
        _DHDR.pack_into(hdr, 0, slope, icpt, cap, n, self.density_lo,
                        self.density_hi, bb, 0, 0)
        write(chunk, bytes(hdr))
        bits = np.packbits(mask, bitorder="little").tobytes()
        for i in range(bb):
            part = bits[i * bs:(i + 1) * bs]
            write(chunk + 1 + i, part + bytes(bs - len(part)))
        raw = full.astype("<u8").tobytes()
        per = self.spb * 16
        for i in range(math.ceil(cap / self.spb)):
            part = raw[i * per:(i + 1) * per]
            write(chunk + 1 + bb + i, part + bytes(bs - len(part)))
        self.n_data += 1
        self.max_cap = max(self.max_cap, cap)
        return chunk

    def _build(self, records: np.ndarray, depth: int, ctx=None) -> int:
        """Recursive fanout-tree construction; returns a tagged address."""
        n = records.shape[0]
        self.height = max(self.height, depth)
        if n <= self.data_target:
            return _tag_data(self._write_data_node(records, self._capacity_for(n), ctx))
        fanout = min(256, max(2, 1 << math.ceil(math.log2(n / self.data_target))))
        keys = records[:, 0].astype(np.float64)
        slope, icpt = _ls_fit(keys, (np.arange(n, dtype=np.float64) + 0.5) * (fanout / n))
        pred = np.clip(np.floor(slope * keys + icpt), 0, fanout - 1).astype(np.int64)
        if pred[-1] == pred[0]:
            # degenerate model: anchor on the key span instead
            span = keys[-1] - keys[0]
            if span <= 0.0:  # float-collapsed keys; one big data node
                return _tag_data(self._write_data_node(records, self._capacity_for(n), ctx))
            slope = (fanout - 1) / span
            icpt = 0.5 - slope * keys[0]
            pred = np.clip(np.floor(slope * keys + icpt), 0, fanout - 1).astype(np.int64)
        blk, off = self._reserve_inner(24 + 8 * fanout)
        bounds = np.searchsorted(pred, np.arange(fanout + 1), side="left")
        children = np.zeros(fanout, dtype=np.uint64)
        prev_addr = 0
        for b in range(fanout):
            lo, hi = bounds[b], bounds[b + 1]
            if hi > lo:
                prev_addr = self._build(records[lo:hi], depth + 1, ctx)
            elif prev_addr == 0:
                # leading empty buckets share the first real child, patched below
                children[b] = 0
                continue
            children[b] = prev_addr
        first = children[np.flatnonzero(children)[0]] if np.any(children) else 0
        children[children == 0] = first
        self._write_inner(blk, off, fanout, slope, icpt, children, ctx)
        return _tag_inner(blk, off)

    # ------------------------------------------------------------------

    def bulk_load(self, keys, payloads):
        keys = as_u64(keys)
        payloads = as_u64(payloads)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InputError("bulk load requires strictly increasing keys")
        if keys.size and int(keys[-1]) == KEY_SENTINEL:
            raise InputError("the maximum u64 value is reserved")
        self.count = int(keys.size)
        if keys.size == 0:
            self.inner_store.root_addr = 0
            self.flush()
            return
        records = np.column_stack([keys, payloads])
        self.height = 1
        self.inner_store.root_addr = self._build(records, 1)
        self.flush()
        if self.hybrid:
            self.inner_store.pin_all()

    # ------------------------------------------------------------------
    # slot and bitmap access

    def _slot_block(self, chunk, bb, j):
        return chunk + 1 + bb + j // self.spb

    def _read_slots(self, ctx, chunk, bb, lo, hi) -> np.ndarray:
        parts = []
        per = self.spb
        for b in range(lo // per, (hi - 1) // per + 1):
            data = ctx.read(self.data_store, chunk + 1 + bb + b)
            s = lo - b * per if b == lo // per else 0
            e = hi - b * per if b == (hi - 1) // per else per
            parts.append(np.frombuffer(data, dtype="<u8", count=2 * (e - s),
                                       offset=16 * s).reshape(-1, 2))
        return parts[0] if len(parts) == 1 else np.vstack(parts)

    def _slot_key(self, ctx, chunk, bb, j) -> int:
        data = ctx.read(self.data_store, self._slot_block(chunk, bb, j))
        return int(np.frombuffer(data, "<u8", count=1, offset=16 * (j % self.spb))[0])

    def _bitmap_word(self, ctx, chunk, j):
        """The bitmap block covering bit j, as a bool array and its bit base."""
        b = j // self.bpb
        data = ctx.read(self.data_store, chunk + 1 + b)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        return bits, b * self.bpb

    def _prev_live(self, ctx, chunk, bb, cap, j) -> int:
        """Largest live slot <= j, or -1."""
        while j >= 0:
            bits, base = self._bitmap_word(ctx, chunk, j)
            sub = bits[: j - base + 1]
            hits = np.flatnonzero(sub)
            if hits.size:
                return base + int(hits[-1])
            j = base - 1
        return -1

    def _next_live(self, ctx, chunk, bb, cap, j) -> int:
        """Smallest live slot >= j, or cap."""
        while j < cap:
            bits, base = self._bitmap_word(ctx, chunk, j)
            sub = bits[j - base: min(cap - base, self.bpb)]
            hits = np.flatnonzero(sub)
            if hits.size:
                return j + int(hits[0])
            j = base + self.bpb
        return cap

    def _prev_gap(self, ctx, chunk, bb, cap, j) -> int:
        while j >= 0:
            bits, base = self._bitmap_word(ctx, chunk, j)
            sub = bits[: j - base + 1]
            hits = np.flatnonzero(sub == 0)
            if hits.size:
                g = base + int(hits[-1])
                return g if g < cap else -1
            j = base - 1
        return -1

    def _next_gap(self, ctx, chunk, bb, cap, j) -> int:
        while j < cap:
            bits, base = self._bitmap_word(ctx, chunk, j)
            sub = bits[j - base: min(cap - base, self.bpb)]
            hits = np.flatnonzero(sub == 0)
            if hits.size:
                return j + int(hits[0])
            j = base + self.bpb
        return cap

    # ------------------------------------------------------------------
    # descent and search

    def _descend(self, key, ctx):
        """Route to a data node; returns (chunk, path).

        path entries are (blk, off, child_idx) for parent patching.
        """
        addr = self.inner_store.root_addr
        path = []
        while True:
            is_data, blk, off = _untag(addr)
            if is_data:
                return blk, path
            fanout, slope, icpt, children = self._read_inner(blk, off, ctx)
            c = int(np.floor(slope * np.float64(key) + icpt))
            c = min(max(c, 0), fanout - 1)
            path.append((blk, off, c))
            addr = int(children[c])

    def _read_dheader(self, ctx, chunk):
        ctx.category = "leaf"
        data = ctx.read(self.data_store, chunk)
        return _DHDR.unpack(data[:48])

    def _exp_search(self, ctx, chunk, bb, cap, pred, key):
        """First slot with stored key >= ``key`` (copies count; may be cap)."""
        if self._slot_key(ctx, chunk, bb, pred) >= key:
            # answer in [0, pred]: double the radius until a value < key
            step = 1
            hi = pred
            lo = pred - 1
            while lo >= 0 and self._slot_key(ctx, chunk, bb, lo) >= key:
                hi = lo
                step *= 2
                lo = pred - step
            lo = max(lo, -1)
        else:
            # answer in (pred, cap]
            step = 1
            lo = pred
            hi = pred + 1
            while hi < cap and self._slot_key(ctx, chunk, bb, hi) < key:
                lo = hi
                step *= 2
                hi = pred + step
            if hi >= cap:
                if self._slot_key(ctx, chunk, bb, cap - 1) < key:
                    return cap
                hi = cap - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._slot_key(ctx, chunk, bb, mid) >= key:
                hi = mid
            else:
                lo = mid
        return hi

    def lookup(self, key: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        if self.inner_store.root_addr == 0:
            return None
        chunk, _ = self._descend(key, ctx)
        slope, icpt, cap, cnt, _, _, bb, _, _ = self._read_dheader(ctx, chunk)
        if cnt == 0:
            return None
        pred = min(max(int(np.floor(slope * np.float64(key) + icpt)), 0), cap - 1)
        r0 = self._exp_search(ctx, chunk, bb, cap, pred, key)
        if r0 < cap:
            rec = self._read_slots(ctx, chunk, bb, r0, r0 + 1)
            if int(rec[0, 0]) == key:
                return int(rec[0, 1])
        return None

    # ------------------------------------------------------------------
    # insert

    def insert(self, key: int, payload: int):
        if key == KEY_SENTINEL:
            raise ValueError("the maximum u64 value is reserved")
        ctx = self.begin_op()
        ctx.phase = "search"
        if self.inner_store.root_addr == 0:
            rec = np.array([[key, payload]], dtype=np.uint64)
            ctx.phase = "insert"
            self.inner_store.root_addr = _tag_data(
                self._write_data_node(rec, self._capacity_for(1), ctx))
            self.count = 1
            return
        chunk, path = self._descend(key, ctx)
        self._insert_into_node(key, payload, chunk, path, ctx)

    def _insert_into_node(self, key, payload, chunk, path, ctx):
        slope, icpt, cap, cnt, dlo, dhi, bb, nins, nshift, = self._read_dheader(ctx, chunk)
        pred = min(max(int(np.floor(slope * np.float64(key) + icpt)), 0), cap - 1)
        r0 = self._exp_search(ctx, chunk, bb, cap, pred, key)
        if r0 < cap and self._slot_key(ctx, chunk, bb, r0) == key:
            # upsert: rewrite the live record and every copy of it
            ctx.phase = "insert"
            hi = r0
            while hi + 1 < cap and self._slot_key(ctx, chunk, bb, hi + 1) == key:
                hi += 1
            self._overwrite_slots(ctx, chunk, bb, r0, hi + 1, key, payload)
            return
        ctx.phase = "insert"
        prev = self._prev_live(ctx, chunk, bb, cap, r0 - 1) if r0 > 0 else -1
        succ = self._next_live(ctx, chunk, bb, cap, r0) if r0 < cap else cap
        moved = 0
        if succ - prev > 1:
            m = min(max(pred, prev + 1), succ - 1)
        else:
            # no gap between neighbours: shift toward the nearest one
            gl = self._prev_gap(ctx, chunk, bb, cap, prev) if prev >= 0 else -1
            gr = self._next_gap(ctx, chunk, bb, cap, succ) if succ < cap else cap
            left_d = prev - gl if gl >= 0 else 1 << 60
            right_d = gr - succ if gr < cap else 1 << 60
            if gl < 0 and gr >= cap:
                # node completely full: restructure first, then retry
                ctx.phase = "smo"
                self._smo(chunk, path, ctx)
                ctx.phase = "search"
                chunk, path = self._descend(key, ctx)
                self._insert_into_node(key, payload, chunk, path, ctx)
                return
            if left_d <= right_d:
                self._shift_left(ctx, chunk, bb, gl, prev)
                moved = left_d
                m = prev
                self._set_bit(ctx, chunk, gl, True)
            else:
                self._shift_right(ctx, chunk, bb, succ, gr)
                moved = right_d
                m = succ
                self._set_bit(ctx, chunk, gr, True)
        # place the record and overwrite the copies left of it down to the
        # previous live element
        lo_fill = self._prev_live(ctx, chunk, bb, cap, m - 1) + 1 if m > 0 else 0
        self._overwrite_slots(ctx, chunk, bb, lo_fill, m + 1, key, payload)
        self._set_bit(ctx, chunk, m, True)
        ctx.phase = "maintenance"
        hdr = bytearray(ctx.read(self.data_store, chunk))
        _DHDR.pack_into(hdr, 0, slope, icpt, cap, cnt + 1, dlo, dhi, bb,
                        nins + 1, nshift + moved)
        ctx.write(self.data_store, chunk, bytes(hdr))
        self.count += 1
        if (cnt + 1) / cap > dhi:
            ctx.phase = "smo"
            self._smo(chunk, path, ctx)

    def _overwrite_slots(self, ctx, chunk, bb, lo, hi, key, payload):
        rec = np.empty(2, dtype="<u8")
        rec[0] = key
        rec[1] = payload
        raw = rec.tobytes()
        per = self.spb
        for b in range(lo // per, (hi - 1) // per + 1):
            blk = chunk + 1 + bb + b
            data = bytearray(ctx.read(self.data_store, blk))
            s = max(lo - b * per, 0)
            e = min(hi - b * per, per)
            data[16 * s:16 * e] = raw * (e - s)
            ctx.write(self.data_store, blk, bytes(data))

    def _shift_left(self, ctx, chunk, bb, gap, upto):
        """Move slots (gap, upto] one left; frees ``upto``."""
        recs = self._read_slots(ctx, chunk, bb, gap + 1, upto + 1)
        self._write_slot_range(ctx, chunk, bb, gap, recs)

    def _shift_right(self, ctx, chunk, bb, frm, gap):
        """Move slots [frm, gap) one right; frees ``frm``."""
        recs = self._read_slots(ctx, chunk, bb, frm, gap)
        self._write_slot_range(ctx, chunk, bb, frm + 1, recs)

    def _write_slot_range(self, ctx, chunk, bb, start, recs):
        per = self.spb
        n = recs.shape[0]
        raw = np.ascontiguousarray(recs, dtype="<u8").tobytes()
        for b in range(start // per, (start + n - 1) // per + 1):
            blk = chunk + 1 + bb + b
            data = bytearray(ctx.read(self.data_store, blk))
            s = max(start - b * per, 0)
            e = min(start + n - b * per, per)
            roff = (b * per + s - start) * 16
            data[16 * s:16 * e] = raw[roff:roff + 16 * (e - s)]
            ctx.write(self.data_store, blk, bytes(data))

    def _set_bit(self, ctx, chunk, j, value):
        b = j // self.bpb
        blk = chunk + 1 + b
        data = bytearray(ctx.read(self.data_store, blk))
        byte, bit = (j - b * self.bpb) // 8, (j - b * self.bpb) % 8
        if value:
            data[byte] |= 1 << bit
        else:
            data[byte] &= ~(1 << bit)
        ctx.write(self.data_store, blk, bytes(data))

    # ------------------------------------------------------------------
    # structural modification

    def _live_records(self, ctx, chunk, cap, cnt, bb) -> np.ndarray:
        slots = self._read_slots(ctx, chunk, bb, 0, cap)
        bits = []
        for b in range(bb):
            data = ctx.read(self.data_store, chunk + 1 + b)
            bits.append(np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little"))
        mask = np.concatenate(bits)[:cap].astype(bool)
        return slots[mask]

    def _patch_parent(self, path, old_addr, new_addr, ctx):
        if not path:
            self.inner_store.root_addr = new_addr
            return
        blk, off, _ = path[-1]
        fanout, slope, icpt, children = self._read_inner(blk, off, ctx)
        kids = children.copy()
        kids[kids == old_addr] = np.uint64(new_addr)
        self._write_inner(blk, off, fanout, slope, icpt, kids, ctx)

    def _smo(self, chunk, path, ctx):
        self.smo_count += 1
        slope, icpt, cap, cnt, dlo, dhi, bb, _, _ = self._read_dheader(ctx, chunk)
        records = self._live_records(ctx, chunk, cap, cnt, bb)
        new_cap = 2 * cap
        _, total = self._node_blocks(new_cap)
        if total * self.data_store.block_size <= self.max_node_bytes:
            new_chunk = self._write_data_node(records, new_cap, ctx)
            self.n_data -= 1  # replacement, not an extra node
            self._patch_parent(path, _tag_data(chunk), _tag_data(new_chunk), ctx)
            return
        self._split(chunk, path, records, ctx)

    def _split(self, chunk, path, records, ctx):
        old_addr = _tag_data(chunk)
        if not path:
            # a root data node: rebuild it as a subtree
            self.inner_store.root_addr = self._build(records, 1, ctx)
            self.n_data -= 1
            return
        blk, off, _ = path[-1]
        fanout, slope, icpt, children = self._read_inner(blk, off, ctx)
        orig_fanout = fanout
        children = children.copy()
        keys = records[:, 0].astype(np.float64)
        while True:
            pred = np.clip(np.floor(slope * keys + icpt), 0, fanout - 1).astype(np.int64)
            if pred[0] != pred[-1]:
                break
            if fanout >= 256:
                # cannot refine the parent further: rebuild as a subtree
                sub = self._build(records, len(path) + 1, ctx)
                self._patch_parent(path, old_addr, sub, ctx)
                self.n_data -= 1
                return
            # double the parent's child array (each bucket becomes two)
            fanout, slope, icpt = fanout * 2, slope * 2, icpt * 2
            children = np.repeat(children, 2)
        # choose the bucket boundary closest to the median record
        lo_b, hi_b = int(pred[0]), int(pred[-1])
        cands = np.arange(lo_b + 1, hi_b + 1)
        splits = np.searchsorted(pred, cands, side="left")
        c = int(cands[np.argmin(np.abs(splits - records.shape[0] // 2))])
        at = int(np.searchsorted(pred, c, side="left"))
        left = self._write_data_node(records[:at], self._capacity_for(at), ctx)
        right = self._write_data_node(records[at:], self._capacity_for(records.shape[0] - at), ctx)
        self.n_data -= 1
        kids = children
        for i in np.flatnonzero(kids == old_addr):
            kids[i] = _tag_data(left) if i < c else _tag_data(right)
        if fanout == orig_fanout:
            self._write_inner(blk, off, fanout, slope, icpt, kids, ctx)
        else:
            # the doubled child array no longer fits in place: relocate the
            # parent and patch the grandparent (or the root address)
            nblk, noff = self._reserve_inner(24 + 8 * fanout)
            self._write_inner(nblk, noff, fanout, slope, icpt, kids, ctx)
            self._patch_parent(path[:-1], _tag_inner(blk, off), _tag_inner(nblk, noff), ctx)

    # ------------------------------------------------------------------
    # scan

    def _leftmost_data(self, addr, ctx):
        while True:
            is_data, blk, off = _untag(addr)
            if is_data:
                return blk
            _, _, _, children = self._read_inner(blk, off, ctx)
            addr = int(children[0])

    def _next_node(self, path, ctx):
        """Data node to the right of the current path, descending leftmost."""
        while path:
            blk, off, c = path.pop()
            fanout, slope, icpt, children = self._read_inner(blk, off, ctx)
            cur = int(children[c])
            for nc in range(c + 1, fanout):
                if int(children[nc]) != cur:
                    path.append((blk, off, nc))
                    return self._leftmost_data(int(children[nc]), ctx), path
        return None, []

    def scan(self, start_key: int, count: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        out: list[tuple[int, int]] = []
        if count < 1 or self.inner_store.root_addr == 0:
            return out
        chunk, path = self._descend(start_key, ctx)
        while chunk is not None and len(out) < count:
            slope, icpt, cap, cnt, _, _, bb, _, _ = self._read_dheader(ctx, chunk)
            if cnt > 0:
                pred = min(max(int(np.floor(slope * np.float64(start_key) + icpt)), 0), cap - 1)
                j = self._exp_search(ctx, chunk, bb, cap, pred, start_key)
                j = self._next_live(ctx, chunk, bb, cap, j) if j < cap else cap
                while j < cap and len(out) < count:
                    # stream the bitmap one block at a time
                    bits, base = self._bitmap_word(ctx, chunk, j)
                    live = np.flatnonzero(bits[j - base: min(cap - base, self.bpb)]) + j
                    if live.size == 0:
                        j = base + self.bpb
                        continue
                    need = count - len(out)
                    take = live[:need]
                    recs = self._read_slots(ctx, chunk, bb, int(take[0]), int(take[-1]) + 1)
                    for s in take:
                        r = recs[int(s) - int(take[0])]
                        out.append((int(r[0]), int(r[1])))
                    j = int(take[-1]) + 1
                    if len(out) >= count:
                        return out
            chunk, path = self._next_node(path, ctx)
        return out

    # ------------------------------------------------------------------

    def enable_hybrid(self):
        if self.layout != 2:
            raise ValueError("hybrid mode requires the two-file layout")
        self.hybrid = True
        self.inner_store.pin_all()

    def cost_params(self):
        return {
            "n": max(self.count, 1),
            "m": max(self.max_cap, 2),
            "rec_per_block": self.spb,
        }
