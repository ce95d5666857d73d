"""Disk FITing-tree with the delta insert strategy.

Data sits in segments produced by the streaming segmentation: each segment
is one contiguous chunk of blocks holding a 48-byte header, the sorted body
records, and a trailing sorted insert buffer. A B+-tree directory maps each
segment's first key to (address, model, body count), so a lookup resolves
the model from the directory and touches only the predicted body window.
Keys below the global minimum go to a one-block head buffer whose overflow
is segmented and prepended to the chain.

Segment header (48 bytes at chunk offset 0):
  slope(f64) | intercept(f64) | count(u32) | buffer_count(u32) |
  left(u64) | right(u64) | left_count(u32) | right_count(u32)

Body records start at offset 48 (16-byte aligned, never straddling blocks);
the buffer occupies dedicated blocks after the body, padded with sentinel
keys so its occupancy is readable from the buffer block itself. The header
copy of buffer_count is still rewritten on every insert - that separate
block write is a deliberate cost of this design.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .base import DiskIndex, as_u64
from .blockstore import (
    KEY_SENTINEL,
    KIND_FITING,
    BlockStore,
    OpContext,
    pack_addr,
)
from .bptree import BPlusTree
from .model import InputError, optimal_pla

_HDR = struct.Struct("<ddIIQQII")  # 48 bytes
_ENTRY = struct.Struct("<QddI4x")  # seg block, slope, intercept, count = 32 bytes
_BODY_OFF = 48
_META = struct.Struct("<QQQQQQQQII")


class FitingTree(DiskIndex):
    kind = "fiting"

    def __init__(self, store: BlockStore, eps: int = 64, buffer_size: int = 256,
                 fill: float = 0.8):
        super().__init__()
        self.store = store
        self.eps = eps
        self.buffer_size = buffer_size
        self.directory = BPlusTree(store, value_size=_ENTRY.size, fill=fill,
                                   inner_category="inner", leaf_category="inner")
        bs = store.block_size
        self.buffer_blocks = math.ceil(buffer_size * 16 / bs)
        self.head_cap = bs // 16
        if store.meta_extra:
            (self.head_blk, self.global_min, root, height, dcount,
             self.seg_count, self.max_seg, self.count,
             self.eps, self.buffer_size) = _META.unpack(store.meta_extra)
            self.directory.restore(root, height, dcount)
            self.buffer_blocks = math.ceil(self.buffer_size * 16 / bs)
        else:
            self.head_blk = store.allocate()
            store.write_block(self.head_blk, b"\xff" * bs)
            self.global_min = KEY_SENTINEL
            self.seg_count = 0
            self.max_seg = 1
            self.count = 0

    # ------------------------------------------------------------------

    @classmethod
    def create(cls, path, block_size=4096, buffer=None, eps=64, buffer_size=256,
               fill=0.8, **_):
        store = BlockStore.create(path, block_size, buffer=buffer, kind=KIND_FITING)
        return cls(store, eps, buffer_size, fill)

    @classmethod
    def open(cls, path, block_size=4096, buffer=None, **_):
        store = BlockStore.open(path, block_size, buffer=buffer, kind=KIND_FITING)
        return cls(store)

    def stores(self):
        return [self.store]

    def flush(self):
        self.store.meta_extra = _META.pack(
            self.head_blk, self.global_min, *self.directory.state(),
            self.seg_count, self.max_seg, self.count, self.eps, self.buffer_size)
        super().flush()

    def close(self):
        self.store.meta_extra = _META.pack(
            self.head_blk, self.global_min, *self.directory.state(),
            self.seg_count, self.max_seg, self.count, self.eps, self.buffer_size)
        super().close()

    # ------------------------------------------------------------------
    # segment I/O helpers

    def _body_blocks(self, count: int) -> int:
        return math.ceil((_BODY_OFF + 16 * count) / self.store.block_size)

    def _write_segment(self, chunk, spec, records, left, right, left_count,
                       right_count, ctx=None):
        """Write header, body blocks, and a fresh sentinel buffer."""
        bs = self.store.block_size
        count = records.shape[0]
        nblocks = self._body_blocks(count)
        buf = bytearray(nblocks * bs)
        _HDR.pack_into(buf, 0, spec.model.slope, spec.model.intercept,
                       count, 0, left, right, left_count, right_count)
        buf[_BODY_OFF:_BODY_OFF + 16 * count] = np.ascontiguousarray(records, dtype="<u8").tobytes()
        write = self.store.write_block if ctx is None else (lambda b, d: ctx.write(self.store, b, d))
        for i in range(nblocks):
            write(chunk + i, bytes(buf[i * bs:(i + 1) * bs]))
        for i in range(self.buffer_blocks):
            write(chunk + nblocks + i, b"\xff" * bs)

    def _read_header(self, ctx, chunk):
        data = ctx.read(self.store, chunk)
        return _HDR.unpack_from(data, 0)

    def _read_body(self, ctx, chunk, lo, hi):
        """Records [lo, hi) of a segment body as an (n, 2) u64 array."""
        bs = self.store.block_size
        b0 = (_BODY_OFF + 16 * lo) // bs
        b1 = (_BODY_OFF + 16 * hi - 1) // bs
        parts = [ctx.read(self.store, chunk + b) for b in range(b0, b1 + 1)]
        raw = b"".join(parts)
        off = _BODY_OFF + 16 * lo - b0 * bs
        return np.frombuffer(raw, dtype="<u8", count=2 * (hi - lo), offset=off).reshape(-1, 2)

    def _read_buffer(self, ctx, chunk, count):
        base = chunk + self._body_blocks(count)
        parts = [ctx.read(self.store, base + i) for i in range(self.buffer_blocks)]
        arr = np.frombuffer(b"".join(parts), dtype="<u8").reshape(-1, 2)[:self.buffer_size]
        n = int(np.searchsorted(arr[:, 0], np.uint64(KEY_SENTINEL)))
        return base, arr, n

    def _write_buffer(self, ctx, base, arr):
        bs = self.store.block_size
        raw = np.ascontiguousarray(arr, dtype="<u8").tobytes()
        raw = raw + b"\xff" * (self.buffer_blocks * bs - len(raw))
        for i in range(self.buffer_blocks):
            ctx.write(self.store, base + i, raw[i * bs:(i + 1) * bs])

    # ------------------------------------------------------------------
    # bulk load

    def bulk_load(self, keys, payloads):
        keys = as_u64(keys)
        payloads = as_u64(payloads)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InputError("bulk load requires strictly increasing keys")
        if keys.size and int(keys[-1]) == KEY_SENTINEL:
            raise InputError("the maximum u64 value is reserved")
        self.count = int(keys.size)
        if keys.size == 0:
            self.flush()
            return
        records = np.column_stack([keys, payloads])
        specs = optimal_pla(keys, self.eps)
        chunks = []
        for spec in specs:
            chunks.append(self.store.allocate(self._body_blocks(spec.count) + self.buffer_blocks))
        pos = 0
        dir_keys = np.empty(len(specs), dtype=np.uint64)
        dir_vals = np.empty((len(specs), _ENTRY.size), dtype=np.uint8)
        for i, spec in enumerate(specs):
            left = pack_addr(chunks[i - 1]) if i > 0 else 0
            right = pack_addr(chunks[i + 1]) if i < len(specs) - 1 else 0
            lcount = specs[i - 1].count if i > 0 else 0
            rcount = specs[i + 1].count if i < len(specs) - 1 else 0
            self._write_segment(chunks[i], spec, records[pos:pos + spec.count],
                                left, right, lcount, rcount)
            dir_keys[i] = spec.first_key
            dir_vals[i] = np.frombuffer(
                _ENTRY.pack(chunks[i], spec.model.slope, spec.model.intercept, spec.count),
                dtype=np.uint8)
            pos += spec.count
        self.directory.bulk_load(dir_keys, dir_vals)
        self.seg_count = len(specs)
        self.max_seg = max(s.count for s in specs)
        self.global_min = int(keys[0])
        self.flush()

    # ------------------------------------------------------------------
    # lookup

    def _locate(self, key, ctx):
        """Directory descent; returns (chunk, slope, intercept, count)."""
        hit = self.directory.floor_lookup(key, ctx)
        if hit is None:
            return None
        _, raw = hit
        chunk, slope, intercept, count = _ENTRY.unpack(raw)
        return chunk, slope, intercept, count

    def _window(self, key, slope, intercept, count):
        pred = int(np.floor(slope * np.float64(key) + intercept))
        pred = min(max(pred, 0), count - 1)
        lo = max(pred - self.eps, 0)
        hi = min(pred + self.eps + 1, count)
        return lo, hi

    def _search_head(self, key, ctx):
        ctx.category = "leaf"
        data = ctx.read(self.store, self.head_blk)
        arr = np.frombuffer(data, dtype="<u8").reshape(-1, 2)
        n = int(np.searchsorted(arr[:, 0], np.uint64(KEY_SENTINEL)))
        idx = int(np.searchsorted(arr[:n, 0], np.uint64(key)))
        if idx < n and int(arr[idx, 0]) == key:
            return arr, n, idx
        return arr, n, -1

    def lookup(self, key: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        if key < self.global_min:
            arr, _, idx = self._search_head(key, ctx)
            return int(arr[idx, 1]) if idx >= 0 else None
        loc = self._locate(key, ctx)
        if loc is None:
            return None
        chunk, slope, intercept, count = loc
        lo, hi = self._window(key, slope, intercept, count)
        ctx.category = "leaf"
        body = self._read_body(ctx, chunk, lo, hi)
        idx = int(np.searchsorted(body[:, 0], np.uint64(key)))
        if idx < body.shape[0] and int(body[idx, 0]) == key:
            return int(body[idx, 1])
        _, arr, n = self._read_buffer(ctx, chunk, count)
        idx = int(np.searchsorted(arr[:n, 0], np.uint64(key)))
        if idx < n and int(arr[idx, 0]) == key:
            return int(arr[idx, 1])
        return None

    # ------------------------------------------------------------------
    # insert

    def insert(self, key: int, payload: int):
        if key == KEY_SENTINEL:
            raise ValueError("the maximum u64 value is reserved")
        ctx = self.begin_op()
        self._insert(key, payload, ctx)

    def _insert(self, key, payload, ctx):
        ctx.phase = "search"
        ctx.category = "leaf"
        if key < self.global_min:
            arr, n, idx = self._search_head(key, ctx)
            if idx >= 0:
                upd = arr.copy()
                upd[idx, 1] = payload
                ctx.phase = "insert"
                ctx.write(self.store, self.head_blk, upd.astype("<u8").tobytes())
                return
            if n >= self.head_cap:
                self._flush_head(arr[:n], ctx)
                self._insert(key, payload, ctx)
                return
            upd = np.insert(arr[:n], idx if idx >= 0 else int(np.searchsorted(arr[:n, 0], np.uint64(key))),
                            np.array([[key, payload]], dtype=np.uint64), axis=0)
            ctx.phase = "insert"
            raw = upd.astype("<u8").tobytes()
            raw += b"\xff" * (self.store.block_size - len(raw))
            ctx.write(self.store, self.head_blk, raw)
            self.count += 1
            return
        loc = self._locate(key, ctx)
        chunk, slope, intercept, count = loc
        lo, hi = self._window(key, slope, intercept, count)
        ctx.category = "leaf"
        body = self._read_body(ctx, chunk, lo, hi)
        idx = int(np.searchsorted(body[:, 0], np.uint64(key)))
        if idx < body.shape[0] and int(body[idx, 0]) == key:
            # upsert in place: rewrite the block holding this record
            bs = self.store.block_size
            byte = _BODY_OFF + 16 * (lo + idx)
            blk = chunk + byte // bs
            data = bytearray(ctx.read(self.store, blk))
            struct.pack_into("<Q", data, byte % bs + 8, payload)
            ctx.phase = "insert"
            ctx.write(self.store, blk, bytes(data))
            return
        base, arr, n = self._read_buffer(ctx, chunk, count)
        bidx = int(np.searchsorted(arr[:n, 0], np.uint64(key)))
        if bidx < n and int(arr[bidx, 0]) == key:
            upd = arr.copy()
            upd[bidx, 1] = payload
            ctx.phase = "insert"
            self._write_buffer(ctx, base, upd)
            return
        if n >= self.buffer_size:
            self._resegment(chunk, ctx)
            self._insert(key, payload, ctx)
            return
        upd = np.insert(arr[:n], bidx, np.array([[key, payload]], dtype=np.uint64), axis=0)
        ctx.phase = "insert"
        full = np.vstack([upd, np.full((self.buffer_size - upd.shape[0], 2), KEY_SENTINEL, dtype=np.uint64)])
        self._write_buffer(ctx, base, full)
        self.count += 1
        # separate header write to bump the buffer count
        ctx.phase = "maintenance"
        data = bytearray(ctx.read(self.store, chunk))
        struct.pack_into("<I", data, 20, n + 1)
        ctx.write(self.store, chunk, bytes(data))

    # ------------------------------------------------------------------
    # structural modification

    def _chain_segments(self, records, ctx, left_addr, left_count,
                        right_addr, right_count):
        """Segment ``records`` and write a fresh sibling chain; returns specs+chunks."""
        specs = optimal_pla(records[:, 0], self.eps)
        chunks = [self.store.allocate(self._body_blocks(s.count) + self.buffer_blocks)
                  for s in specs]
        pos = 0
        for i, spec in enumerate(specs):
            lft = pack_addr(chunks[i - 1]) if i > 0 else left_addr
            rgt = pack_addr(chunks[i + 1]) if i < len(specs) - 1 else right_addr
            lc = specs[i - 1].count if i > 0 else left_count
            rc = specs[i + 1].count if i < len(specs) - 1 else right_count
            self._write_segment(chunks[i], spec, records[pos:pos + spec.count],
                                lft, rgt, lc, rc, ctx=ctx)
            pos += spec.count
        self.max_seg = max(self.max_seg, max(s.count for s in specs))
        return specs, chunks

    def _patch_neighbor(self, ctx, addr, new_sibling, new_count, side):
        """Rewrite a neighbor header's sibling pointer and sibling count."""
        if addr == 0:
            return
        blk = addr >> 32
        data = bytearray(ctx.read(self.store, blk))
        if side == "left":  # neighbor sits left of the new chain
            struct.pack_into("<Q", data, 32, new_sibling)
            struct.pack_into("<I", data, 44, new_count)
        else:
            struct.pack_into("<Q", data, 24, new_sibling)
            struct.pack_into("<I", data, 40, new_count)
        ctx.write(self.store, blk, bytes(data))

    def _dir_put(self, spec, chunk, ctx):
        val = _ENTRY.pack(chunk, spec.model.slope, spec.model.intercept, spec.count)
        self.directory.insert(int(spec.first_key), val, ctx, phases=("smo", "smo", "smo"))

    def _resegment(self, chunk, ctx):
        ctx.phase = "smo"
        self.smo_count += 1
        slope, intercept, count, bcount, left, right, lcount, rcount = self._read_header(ctx, chunk)
        body = self._read_body(ctx, chunk, 0, count)
        _, barr, bn = self._read_buffer(ctx, chunk, count)
        merged = np.empty((count + bn, 2), dtype=np.uint64)
        order = np.argsort(np.concatenate([body[:, 0], barr[:bn, 0]]), kind="stable")
        merged[:] = np.vstack([body, barr[:bn]])[order]
        specs, chunks = self._chain_segments(merged, ctx, left, lcount, right, rcount)
        self._patch_neighbor(ctx, left, pack_addr(chunks[0]), specs[0].count, "left")
        self._patch_neighbor(ctx, right, pack_addr(chunks[-1]), specs[-1].count, "right")
        for spec, chk in zip(specs, chunks):
            self._dir_put(spec, chk, ctx)  # first spec upserts the old entry
        self.seg_count += len(specs) - 1

    def _flush_head(self, records, ctx):
        """Head buffer overflow: segment its records and prepend them."""
        ctx.phase = "smo"
        self.smo_count += 1
        old_first_addr = 0
        old_first_count = 0
        if self.global_min != KEY_SENTINEL:
            loc = self._locate(self.global_min, ctx)
            old_first_addr = pack_addr(loc[0])
            old_first_count = loc[3]
        specs, chunks = self._chain_segments(np.ascontiguousarray(records), ctx,
                                             0, 0, old_first_addr, old_first_count)
        self._patch_neighbor(ctx, old_first_addr, pack_addr(chunks[-1]), specs[-1].count, "right")
        for spec, chk in zip(specs, chunks):
            self._dir_put(spec, chk, ctx)
        self.seg_count += len(specs)
        self.global_min = int(records[0, 0])
        ctx.write(self.store, self.head_blk, b"\xff" * self.store.block_size)

    # ------------------------------------------------------------------
    # scan

    def scan(self, start_key: int, count: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        out: list[tuple[int, int]] = []
        if count < 1:
            return out
        if start_key < self.global_min:
            arr, n, _ = self._search_head(start_key, ctx)
            idx = int(np.searchsorted(arr[:n, 0], np.uint64(start_key)))
            for i in range(idx, n):
                out.append((int(arr[i, 0]), int(arr[i, 1])))
                if len(out) >= count:
                    return out
            if self.global_min == KEY_SENTINEL:
                return out
            start_key = self.global_min
        loc = self._locate(start_key, ctx)
        if loc is None:
            return out
        chunk = loc[0]
        first = True
        while chunk != 0 and len(out) < count:
            ctx.category = "leaf"
            slope, intercept, scount, bcount, left, right, lc, rc = self._read_header(ctx, chunk)
            need = count - len(out)
            if first:
                lo, _ = self._window(start_key, slope, intercept, scount)
                hi = min(scount, lo + 2 * self.eps + need + 1)
                first = False
            else:
                lo, hi = 0, min(scount, need)
            body = self._read_body(ctx, chunk, lo, hi)
            bi = int(np.searchsorted(body[:, 0], np.uint64(start_key)))
            if bcount > 0:
                _, barr, bn = self._read_buffer(ctx, chunk, scount)
                fi = int(np.searchsorted(barr[:bn, 0], np.uint64(start_key)))
            else:
                barr, bn, fi = None, 0, 0
            # merge the two sorted streams; pull more body blocks only if the
            # buffer displaced body records past the prefetched window
            while len(out) < count and (bi < body.shape[0] or fi < bn or hi < scount):
                if bi >= body.shape[0] and hi < scount:
                    nhi = min(scount, hi + (count - len(out)))
                    body = np.vstack([body, self._read_body(ctx, chunk, hi, nhi)])
                    hi = nhi
                    continue
                if fi >= bn and bi >= body.shape[0]:
                    break
                if fi >= bn or (bi < body.shape[0] and body[bi, 0] <= barr[fi, 0]):
                    out.append((int(body[bi, 0]), int(body[bi, 1])))
                    bi += 1
                else:
                    out.append((int(barr[fi, 0]), int(barr[fi, 1])))
                    fi += 1
            chunk = right >> 32 if right != 0 else 0
        return out

    # ------------------------------------------------------------------

    def enable_hybrid(self):
        self.hybrid = True
        self.directory.pin_levels(leaves_too=True)

    def cost_params(self):
        branch = max(2, math.ceil(self.directory.fill *
                                  min(self.directory.leaf_cap, self.directory.inner_cap)))
        return {
            "n": max(self.count, 1),
            "p": max(self.seg_count, 1),
            "branch": branch,
            "rec_per_block": self.store.block_size // 16,
            "eps": self.eps,
            "m": max(self.max_seg, self.buffer_size),
        }

    # audits ------------------------------------------------------------

    def iter_segments(self):
        """Yield (chunk, header tuple, body records) via uncounted reads."""
        if self.global_min == KEY_SENTINEL:
            return
        ctx = OpContext()
        loc = self._locate(self.global_min, ctx)
        chunk = loc[0]
        while chunk != 0:
            data = self.store.peek_block(chunk)
            hdr = _HDR.unpack_from(data, 0)
            nb = self._body_blocks(hdr[2])
            raw = b"".join(self.store.peek_block(chunk + i) for i in range(nb))
            body = np.frombuffer(raw, dtype="<u8", count=2 * hdr[2], offset=_BODY_OFF).reshape(-1, 2)
            yield chunk, hdr, body
            chunk = hdr[5] >> 32
