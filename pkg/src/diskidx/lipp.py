"""Disk LIPP: exact-position lookups through conflict-free linear models.

One node kind. A node is a contiguous chunk of blocks: a 64-byte header
(model, slot count, build size, insert counter, conflict counter) followed
by typed slots. Every slot carries a one-byte flag (NULL / DATA / NODE) kept
in the same block as its 16-byte payload, so resolving one level costs at
most two reads: the header block and the slot block. Nodes small enough to
fit header and slots into a single block cost one read.

Model fitting minimises the conflict degree; keys that still collide are
pushed into a child node built the same way. Every insert updates the
insert counter of every node on its path (one header write per level); a
node whose inserts exceed the rebuild threshold is rebuilt from scratch,
which is the second, expensive kind of structural modification.

Per-block slot layout: flag bytes for the block's slots, padding to a
16-byte boundary, then the slot payloads (DATA: key+payload; NODE: child
block number).
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .base import DiskIndex, as_u64
from .blockstore import (
    KEY_SENTINEL,
    KIND_LIPP,
    BlockStore,
    OpContext,
    pack_addr,
)
from .model import InputError, LinearModel, fmcd_fit

_HDR = struct.Struct("<ddIIII32x")  # slope, intercept, slots, build, inserts, conflicts
_HDR_SIZE = 64
_META = struct.Struct("<QIf4x")

NULL, DATA, NODE = 0, 1, 2


def _alloc_slots(n: int) -> int:
    """Slot budget per the construction rule (generous for small nodes)."""
    if n < 100_000:
        return max(8, 5 * n)
    return 2 * n


class LippIndex(DiskIndex):
    kind = "lipp"

    def __init__(self, store: BlockStore, rebuild_ratio: float = 1.0):
        super().__init__()
        self.store = store
        bs = store.block_size
        self.lspb = bs // 17            # slots per slot-block
        self.slot_off = ((self.lspb + 15) // 16) * 16
        self.small_max = (bs - _HDR_SIZE - 16) // 17  # single-block node limit
        self.count = 0
        self.height = 1
        self.rebuild_ratio = rebuild_ratio
        if store.meta_extra:
            self.count, self.height, self.rebuild_ratio = _META.unpack(store.meta_extra)

    @classmethod
    def create(cls, path, block_size=4096, buffer=None, rebuild_ratio=1.0, **_):
        store = BlockStore.create(path, block_size, buffer=buffer, kind=KIND_LIPP)
        return cls(store, rebuild_ratio)

    @classmethod
    def open(cls, path, block_size=4096, buffer=None, **_):
        store = BlockStore.open(path, block_size, buffer=buffer, kind=KIND_LIPP)
        return cls(store)

    def stores(self):
        return [self.store]

    def flush(self):
        self.store.meta_extra = _META.pack(self.count, self.height, self.rebuild_ratio)
        super().flush()

    def close(self):
        self.flush()
        super().close()

    # ------------------------------------------------------------------
    # node geometry

    def _node_blocks(self, slots: int) -> int:
        if slots <= self.small_max:
            return 1
        return 1 + math.ceil(slots / self.lspb)

    def _slot_pos(self, slots: int, j: int) -> tuple[int, int, int]:
        """(block offset in chunk, flag byte offset, payload offset) of slot j."""
        if slots <= self.small_max:
            return 0, _HDR_SIZE + j, _HDR_SIZE + slots + 16 * j
        b = 1 + j // self.lspb
        i = j % self.lspb
        return b, i, self.slot_off + 16 * i

    # ------------------------------------------------------------------
    # construction

    def _build_node(self, keys, payloads, ctx=None, depth=1) -> int:
        n = keys.size
        self.height = max(self.height, depth)
        if n <= 2:
            out = self._build_tiny(keys, payloads, ctx)
            if out is not None:
                return out
        slots = _alloc_slots(n)
        model = None
        if n <= 8:
            # conflict groups are almost always tiny: try the plain anchor
            # interpolation before the full candidate search
            span = float(keys[-1]) - float(keys[0])
            if span > 0.0:
                slope = (slots - 1) / span
                icpt = 0.5 - slope * float(keys[0])
                preds = np.clip(np.floor(slope * keys.astype(np.float64) + icpt),
                                0, slots - 1).astype(np.int64)
                if np.unique(preds).size == n:
                    model = LinearModel(slope, icpt)
                    degree = 1
        if model is None:
            model, degree = fmcd_fit(keys, slots)
            preds = model.predict_array(keys, slots)
        flags = np.zeros(slots, dtype=np.uint8)
        payload_lo = np.zeros(slots, dtype=np.uint64)
        payload_hi = np.zeros(slots, dtype=np.uint64)
        uniq, starts, counts = np.unique(preds, return_index=True, return_counts=True)
        singles = counts == 1
        sidx = starts[singles]
        flags[uniq[singles]] = DATA
        payload_lo[uniq[singles]] = keys[sidx]
        payload_hi[uniq[singles]] = payloads[sidx]
        nblocks = self._node_blocks(slots)
        chunk = self.store.allocate(nblocks)
        for slot, start, cnt in zip(uniq[~singles], starts[~singles], counts[~singles]):
            if cnt == n:
                raise InputError("keys too close to separate with float64 models")
            sub_keys = keys[start:start + cnt]
            child = self._build_node(sub_keys, payloads[start:start + cnt], ctx, depth + 1)
            flags[slot] = NODE
            payload_lo[slot] = pack_addr(child)
        self._write_node(chunk, model, slots, n, degree, flags, payload_lo, payload_hi, ctx)
        return chunk

    def _build_tiny(self, keys, payloads, ctx):
        """Single-block fast path for one- and two-key nodes."""
        n = keys.size
        slots = _alloc_slots(n)
        if n == 1:
            slope, icpt = 0.0, slots / 2.0
            places = [int(slots // 2)]
        else:
            k0, k1 = float(keys[0]), float(keys[1])
            span = k1 - k0
            if span <= 0.0:
                return None
            slope = (slots - 1) / span
            icpt = 0.5 - slope * k0
            places = [int(np.floor(slope * k + icpt)) for k in (k0, k1)]
            places = [min(max(p, 0), slots - 1) for p in places]
            if places[0] == places[1]:
                return None  # precision collapse; let the full search try
        chunk = self.store.allocate(1)
        blk = bytearray(self.store.block_size)
        _HDR.pack_into(blk, 0, slope, icpt, slots, n, 0, 1)
        soff = _HDR_SIZE + slots
        for i, p in enumerate(places):
            blk[_HDR_SIZE + p] = DATA
            struct.pack_into("<QQ", blk, soff + 16 * p, int(keys[i]), int(payloads[i]))
        if ctx is None:
            self.store.write_block(chunk, bytes(blk))
        else:
            ctx.write(self.store, chunk, bytes(blk))
        return chunk

    def _write_node(self, chunk, model, slots, build_size, degree,
                    flags, payload_lo, payload_hi, ctx=None):
        bs = self.store.block_size
        write = self.store.write_block if ctx is None else (lambda b, d: ctx.write(self.store, b, d))
        hdr = _HDR.pack(model.slope, model.intercept, slots, build_size, 0, degree)
        slot_bytes = np.empty((slots, 2), dtype="<u8")
        slot_bytes[:, 0] = payload_lo
        slot_bytes[:, 1] = payload_hi
        if slots <= self.small_max:
            blk = bytearray(bs)
            blk[:_HDR_SIZE] = hdr
            blk[_HDR_SIZE:_HDR_SIZE + slots] = flags.tobytes()
            off = _HDR_SIZE + slots
            blk[off:off + 16 * slots] = slot_bytes.tobytes()
            write(chunk, bytes(blk))
            return
        head = bytearray(bs)
        head[:_HDR_SIZE] = hdr
        write(chunk, bytes(head))
        per = self.lspb
        nsb = math.ceil(slots / per)
        pad_slots = nsb * per
        fpad = np.zeros(pad_slots, dtype=np.uint8)
        fpad[:slots] = flags
        spad = np.zeros((pad_slots, 2), dtype="<u8")
        spad[:slots] = slot_bytes
        fview = fpad.reshape(nsb, per)
        sview = spad.reshape(nsb, per, 2)
        for i in range(nsb):
            blk = bytearray(bs)
            blk[:per] = fview[i].tobytes()
            blk[self.slot_off:self.slot_off + 16 * per] = sview[i].tobytes()
            write(chunk + 1 + i, bytes(blk))

    def bulk_load(self, keys, payloads):
        keys = as_u64(keys)
        payloads = as_u64(payloads)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InputError("bulk load requires strictly increasing keys")
        if keys.size and int(keys[-1]) == KEY_SENTINEL:
            raise InputError("the maximum u64 value is reserved")
        self.count = int(keys.size)
        self.height = 1
        if keys.size == 0:
            self.store.root_addr = 0
            self.flush()
            return
        root = self._build_node(keys, payloads)
        self.store.root_addr = pack_addr(root)
        self.flush()

    # ------------------------------------------------------------------
    # node access

    def _read_header(self, ctx, chunk):
        ctx.category = "leaf"
        data = ctx.read(self.store, chunk)
        slope, icpt, slots, build, inserts, conflicts = _HDR.unpack_from(data, 0)
        return data, slope, icpt, slots, build, inserts, conflicts

    def _read_slot(self, ctx, chunk, slots, j):
        boff, foff, poff = self._slot_pos(slots, j)
        data = ctx.read(self.store, chunk + boff)
        flag = data[foff]
        lo, hi = struct.unpack_from("<QQ", data, poff)
        return flag, lo, hi

    def _write_slot(self, ctx, chunk, slots, j, flag, lo, hi):
        boff, foff, poff = self._slot_pos(slots, j)
        data = bytearray(ctx.read(self.store, chunk + boff))
        data[foff] = flag
        struct.pack_into("<QQ", data, poff, lo, hi)
        ctx.write(self.store, chunk + boff, bytes(data))

    @staticmethod
    def _predict(slope, icpt, slots, key) -> int:
        p = int(np.floor(slope * np.float64(key) + icpt))
        return min(max(p, 0), slots - 1)

    # ------------------------------------------------------------------

    def lookup(self, key: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        if self.store.root_addr == 0:
            return None
        chunk = self.store.root_addr >> 32
        while True:
            _, slope, icpt, slots, _, _, _ = self._read_header(ctx, chunk)
            j = self._predict(slope, icpt, slots, key)
            flag, lo, hi = self._read_slot(ctx, chunk, slots, j)
            if flag == NULL:
                return None
            if flag == DATA:
                return hi if lo == key else None
            chunk = lo >> 32

    def insert(self, key: int, payload: int):
        if key == KEY_SENTINEL:
            raise ValueError("the maximum u64 value is reserved")
        ctx = self.begin_op()
        ctx.phase = "search"
        if self.store.root_addr == 0:
            ctx.phase = "insert"
            root = self._build_node(np.array([key], dtype=np.uint64),
                                    np.array([payload], dtype=np.uint64), ctx)
            self.store.root_addr = pack_addr(root)
            self.count = 1
            return
        path = []  # (chunk, slots)
        chunk = self.store.root_addr >> 32
        depth = 1
        while True:
            _, slope, icpt, slots, _, _, _ = self._read_header(ctx, chunk)
            path.append((chunk, slots))
            j = self._predict(slope, icpt, slots, key)
            flag, lo, hi = self._read_slot(ctx, chunk, slots, j)
            if flag == NODE:
                chunk = lo >> 32
                depth += 1
                continue
            if flag == NULL:
                ctx.phase = "insert"
                self._write_slot(ctx, chunk, slots, j, DATA, key, payload)
                self.count += 1
                break
            if lo == key:  # upsert
                ctx.phase = "insert"
                self._write_slot(ctx, chunk, slots, j, DATA, key, payload)
                return
            # conflict: push both records into a fresh child node
            ctx.phase = "smo"
            self.smo_count += 1
            pair = sorted([(lo, hi), (key, payload)])
            child = self._build_node(np.array([p[0] for p in pair], dtype=np.uint64),
                                     np.array([p[1] for p in pair], dtype=np.uint64),
                                     ctx, depth + 1)
            self._write_slot(ctx, chunk, slots, j, NODE, pack_addr(child), 0)
            self._bump_conflicts(ctx, chunk)
            self.count += 1
            break
        # maintenance: bump the insert counter of every node on the path
        ctx.phase = "maintenance"
        rebuild_at = -1
        for i, (nchunk, _) in enumerate(path):
            data, slope, icpt, slots, build, inserts, conflicts = self._read_header(ctx, nchunk)
            upd = bytearray(data)
            _HDR.pack_into(upd, 0, slope, icpt, slots, build, inserts + 1, conflicts)
            ctx.write(self.store, nchunk, bytes(upd))
            if rebuild_at < 0 and inserts + 1 > self.rebuild_ratio * build:
                rebuild_at = i
        if rebuild_at >= 0:
            ctx.phase = "smo"
            self._rebuild(path, rebuild_at, ctx)

    def _bump_conflicts(self, ctx, chunk):
        data, slope, icpt, slots, build, inserts, conflicts = self._read_header(ctx, chunk)
        upd = bytearray(data)
        _HDR.pack_into(upd, 0, slope, icpt, slots, build, inserts, conflicts + 1)
        ctx.write(self.store, chunk, bytes(upd))

    # ------------------------------------------------------------------
    # subtree rebuild

    def _collect(self, ctx, chunk, out_keys, out_payloads):
        _, slope, icpt, slots, _, _, _ = self._read_header(ctx, chunk)
        nblocks = self._node_blocks(slots)
        per = self.lspb if nblocks > 1 else slots
        j = 0
        while j < slots:
            boff, _, _ = self._slot_pos(slots, j)
            data = ctx.read(self.store, chunk + boff)
            if nblocks == 1:
                flags = np.frombuffer(data, np.uint8, count=slots, offset=_HDR_SIZE)
                payload = np.frombuffer(data, "<u8", count=2 * slots,
                                        offset=_HDR_SIZE + slots).reshape(-1, 2)
                base = 0
                span = slots
            else:
                span = min(per, slots - (boff - 1) * per)
                flags = np.frombuffer(data, np.uint8, count=span, offset=0)
                payload = np.frombuffer(data, "<u8", count=2 * span,
                                        offset=self.slot_off).reshape(-1, 2)
                base = (boff - 1) * per
            for i in range(span):
                f = flags[i]
                if f == DATA:
                    out_keys.append(int(payload[i, 0]))
                    out_payloads.append(int(payload[i, 1]))
                elif f == NODE:
                    self._collect(ctx, int(payload[i, 0]) >> 32, out_keys, out_payloads)
            j = base + span

    def _rebuild(self, path, at, ctx):
        self.smo_count += 1
        chunk, _ = path[at]
        keys: list[int] = []
        payloads: list[int] = []
        self._collect(ctx, chunk, keys, payloads)
        karr = np.array(keys, dtype=np.uint64)
        parr = np.array(payloads, dtype=np.uint64)
        fresh = self._build_node(karr, parr, ctx, depth=at + 1)
        if at == 0:
            self.store.root_addr = pack_addr(fresh)
            return
        pchunk, pslots = path[at - 1]
        _, slope, icpt, slots, _, _, _ = self._read_header(ctx, pchunk)
        j = self._predict(slope, icpt, slots, int(karr[0]))
        self._write_slot(ctx, pchunk, slots, j, NODE, pack_addr(fresh), 0)

    # ------------------------------------------------------------------
    # scan

    def scan(self, start_key: int, count: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        out: list[tuple[int, int]] = []
        if count < 1 or self.store.root_addr == 0:
            return out
        # initial descent to the start position; ancestors resume after the
        # slot being descended into
        stack: list[tuple[int, int, int]] = []  # (chunk, slots, next slot)
        chunk = self.store.root_addr >> 32
        while True:
            _, slope, icpt, slots, _, _, _ = self._read_header(ctx, chunk)
            j = self._predict(slope, icpt, slots, start_key)
            flag, lo, _ = self._read_slot(ctx, chunk, slots, j)
            if flag == NODE:
                stack.append((chunk, slots, j + 1))
                chunk = lo >> 32
                continue
            stack.append((chunk, slots, j))
            break
        while stack and len(out) < count:
            chunk, slots, j = stack.pop()
            while j < slots and len(out) < count:
                flag, lo, hi = self._read_slot(ctx, chunk, slots, j)
                if flag == DATA:
                    if lo >= start_key:
                        out.append((int(lo), int(hi)))
                elif flag == NODE:
                    stack.append((chunk, slots, j + 1))
                    child = lo >> 32
                    _, cslope, cicpt, cslots, _, _, _ = self._read_header(ctx, child)
                    chunk, slots, j = child, cslots, 0
                    continue
                j += 1
        return out

    # ------------------------------------------------------------------

    def cost_params(self):
        return {
            "n": max(self.count, 1),
            "rec_per_block": self.store.block_size // 16,
        }

    # audits ------------------------------------------------------------

    def audit_exact(self):
        """Every key is reachable by predictions alone; flags match content."""
        ctx = OpContext()
        total = 0
        if self.store.root_addr == 0:
            return 0
        stack = [self.store.root_addr >> 32]
        while stack:
            chunk = stack.pop()
            _, slope, icpt, slots, _, _, _ = self._read_header(ctx, chunk)
            for j in range(slots):
                flag, lo, hi = self._read_slot(ctx, chunk, slots, j)
                if flag == DATA:
                    assert self._predict(slope, icpt, slots, lo) == j
                    total += 1
                elif flag == NODE:
                    stack.append(lo >> 32)
                else:
                    assert flag == NULL
        return total
