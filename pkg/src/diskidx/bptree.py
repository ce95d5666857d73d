"""Disk-resident B+-tree: one node per block, sorted arrays, linked leaves.

Node serialization (little-endian):
  leaf:  kind(u8)=0 | pad | count(u16) | pad(4) | left(u64) | right(u64) |
         keys[leaf_cap * 8B] | values[leaf_cap * value_size]
  inner: kind(u8)=1 | pad | count(u16) | pad(4) |
         keys[inner_cap * 8B] | children[inner_cap * 8B]

Inner entries are (first key of subtree, child address); routing picks the
rightmost separator <= key. The tree is generic over the value width so it
doubles as the segment directory inside the FITing-tree.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .base import DiskIndex, as_u64
from .blockstore import (
    KIND_BPTREE,
    BlockStore,
    OpContext,
    pack_addr,
    unpack_addr,
)
from .model import InputError

LEAF = 0
INNER = 1
_LEAF_HDR = 24
_INNER_HDR = 8


def u64_rows(values) -> np.ndarray:
    """View u64 payloads as (n, 8) byte rows."""
    arr = np.ascontiguousarray(np.asarray(values, dtype="<u8"))
    return arr.view(np.uint8).reshape(-1, 8)


class BPlusTree:
    """Block-backed B+-tree over u64 keys and fixed-width byte values."""

    def __init__(self, store: BlockStore, value_size: int = 8, fill: float = 0.8,
                 inner_category: str = "inner", leaf_category: str = "leaf"):
        if not 0.0 < fill <= 1.0:
            raise ValueError("fill factor must be in (0, 1]")
        self.store = store
        self.vs = value_size
        self.fill = fill
        self.inner_category = inner_category
        self.leaf_category = leaf_category
        bs = store.block_size
        self.leaf_cap = (bs - _LEAF_HDR) // (8 + value_size)
        self.inner_cap = (bs - _INNER_HDR) // 16
        self._voff = _LEAF_HDR + 8 * self.leaf_cap
        self._coff = _INNER_HDR + 8 * self.inner_cap
        self.root = 0
        self.height = 0
        self.count = 0
        self.smo_events = 0
        self.hybrid_pin = False
        self.pin_leaves = False

    # ------------------------------------------------------------------
    # serialization

    def _leaf_block(self, keys, rows, left, right) -> bytes:
        blk = bytearray(self.store.block_size)
        struct.pack_into("<BxH", blk, 0, LEAF, len(keys))
        struct.pack_into("<QQ", blk, 8, left, right)
        blk[_LEAF_HDR:_LEAF_HDR + 8 * len(keys)] = keys.astype("<u8").tobytes()
        raw = np.ascontiguousarray(rows, dtype=np.uint8).tobytes()
        blk[self._voff:self._voff + len(raw)] = raw
        return bytes(blk)

    def _inner_block(self, keys, children) -> bytes:
        blk = bytearray(self.store.block_size)
        struct.pack_into("<BxH", blk, 0, INNER, len(keys))
        blk[_INNER_HDR:_INNER_HDR + 8 * len(keys)] = keys.astype("<u8").tobytes()
        child = np.asarray(children, dtype="<u8")
        blk[self._coff:self._coff + 8 * len(children)] = child.tobytes()
        return bytes(blk)

    def _parse_leaf(self, data):
        count = struct.unpack_from("<H", data, 2)[0]
        left, right = struct.unpack_from("<QQ", data, 8)
        keys = np.frombuffer(data, dtype="<u8", count=count, offset=_LEAF_HDR)
        rows = np.frombuffer(data, dtype=np.uint8, count=count * self.vs,
                             offset=self._voff).reshape(count, self.vs)
        return keys, rows, left, right

    def _parse_inner(self, data):
        count = struct.unpack_from("<H", data, 2)[0]
        keys = np.frombuffer(data, dtype="<u8", count=count, offset=_INNER_HDR)
        children = np.frombuffer(data, dtype="<u8", count=count, offset=self._coff)
        return keys, children

    @staticmethod
    def node_kind(data) -> int:
        return data[0]

    # ------------------------------------------------------------------
    # bulk load

    def bulk_load(self, keys: np.ndarray, rows: np.ndarray) -> None:
        keys = as_u64(keys)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InputError("bulk load requires strictly increasing keys")
        n = keys.size
        self.count = int(n)
        if n == 0:
            self.root = 0
            self.height = 0
            self.store.root_addr = 0
            return
        per_leaf = max(1, math.ceil(self.fill * self.leaf_cap))
        nleaves = math.ceil(n / per_leaf)
        first = self.store.allocate(nleaves)
        for i in range(nleaves):
            lo = i * per_leaf
            hi = min(lo + per_leaf, n)
            left = pack_addr(first + i - 1) if i > 0 else 0
            right = pack_addr(first + i + 1) if i < nleaves - 1 else 0
            self.store.write_block(first + i, self._leaf_block(keys[lo:hi], rows[lo:hi], left, right))
        level_keys = keys[::per_leaf].copy()
        level_blocks = np.arange(first, first + nleaves, dtype=np.uint64)
        self.height = 1
        per_inner = max(2, math.ceil(self.fill * self.inner_cap))
        while level_blocks.size > 1:
            m = level_blocks.size
            ninner = math.ceil(m / per_inner)
            base = self.store.allocate(ninner)
            addrs = np.left_shift(level_blocks, np.uint64(32))
            for i in range(ninner):
                lo = i * per_inner
                hi = min(lo + per_inner, m)
                self.store.write_block(base + i, self._inner_block(level_keys[lo:hi], addrs[lo:hi]))
            level_keys = level_keys[::per_inner].copy()
            level_blocks = np.arange(base, base + ninner, dtype=np.uint64)
            self.height += 1
        self.root = int(level_blocks[0])
        self.store.root_addr = pack_addr(self.root)
        if self.hybrid_pin:
            self.pin_levels()

    # ------------------------------------------------------------------
    # point operations

    def _descend_tagged(self, key, ctx: OpContext):
        """Walk to the leaf for ``key``; returns (leaf_block, data, path)."""
        path = []
        blk = self.root
        kd = np.uint64(key)
        depth = 1
        while True:
            ctx.category = self.leaf_category if depth == self.height else self.inner_category
            data = ctx.read(self.store, blk)
            if self.node_kind(data) == LEAF:
                return blk, data, path
            keys, children = self._parse_inner(data)
            idx = int(np.searchsorted(keys, kd, side="right")) - 1
            if idx < 0:
                idx = 0
            path.append((blk, idx))
            blk = int(children[idx]) >> 32
            depth += 1

    def lookup(self, key: int, ctx: OpContext) -> bytes | None:
        if self.root == 0:
            return None
        _, data, _ = self._descend_tagged(key, ctx)
        keys, rows, _, _ = self._parse_leaf(data)
        idx = int(np.searchsorted(keys, np.uint64(key), side="left"))
        if idx < keys.size and int(keys[idx]) == key:
            return rows[idx].tobytes()
        return None

    def floor_lookup(self, key: int, ctx: OpContext):
        """Entry with the largest key <= ``key``; (entry_key, value) or None."""
        if self.root == 0:
            return None
        _, data, _ = self._descend_tagged(key, ctx)
        keys, rows, left, _ = self._parse_leaf(data)
        idx = int(np.searchsorted(keys, np.uint64(key), side="right")) - 1
        if idx < 0:
            # key precedes every entry of this leaf (and, with first-key
            # routing, every entry of the tree)
            return None
        return int(keys[idx]), rows[idx].tobytes()

    def insert(self, key: int, value: bytes, ctx: OpContext,
               phases: tuple[str, str, str] = ("search", "insert", "smo")) -> None:
        assert len(value) == self.vs
        if self.root == 0:
            blk = self.store.allocate()
            ctx.phase = phases[1]
            row = np.frombuffer(value, dtype=np.uint8).reshape(1, self.vs)
            ctx.write(self.store, blk, self._leaf_block(np.array([key], dtype=np.uint64), row, 0, 0))
            self.root = blk
            self.height = 1
            self.count = 1
            self.store.root_addr = pack_addr(blk)
            return
        ctx.phase = phases[0]
        blk, data, path = self._descend_tagged(key, ctx)
        keys, rows, left, right = self._parse_leaf(data)
        idx = int(np.searchsorted(keys, np.uint64(key), side="left"))
        row = np.frombuffer(value, dtype=np.uint8).reshape(1, self.vs)
        ctx.phase = phases[1]
        if idx < keys.size and int(keys[idx]) == key:
            rows = rows.copy()
            rows[idx] = row
            ctx.write(self.store, blk, self._leaf_block(keys, rows, left, right))
            return
        nkeys = np.insert(keys, idx, np.uint64(key))
        nrows = np.insert(rows, idx, row, axis=0)
        self.count += 1
        if nkeys.size <= self.leaf_cap:
            ctx.write(self.store, blk, self._leaf_block(nkeys, nrows, left, right))
            return
        # split
        ctx.phase = phases[2]
        self.smo_events += 1
        mid = nkeys.size // 2
        new_blk = self.store.allocate()
        new_addr = pack_addr(new_blk)
        ctx.write(self.store, blk, self._leaf_block(nkeys[:mid], nrows[:mid], left, new_addr))
        ctx.write(self.store, new_blk, self._leaf_block(nkeys[mid:], nrows[mid:], pack_addr(blk), right))
        if right != 0:
            rblk = right >> 32
            rdata = ctx.read(self.store, rblk)
            rkeys, rrows, _, rright = self._parse_leaf(rdata)
            ctx.write(self.store, rblk, self._leaf_block(rkeys, rrows, new_addr, rright))
        if self.hybrid_pin and self.pin_leaves:
            self.store.pin_blocks([blk, new_blk])
        self._insert_into_parent(path, int(nkeys[mid]), new_blk, ctx)

    def _insert_into_parent(self, path, sep_key, child_blk, ctx) -> None:
        child_addr = pack_addr(child_blk)
        if not path:
            root_blk = self.store.allocate()
            old_root_key = self._subtree_first_key(ctx)
            keys = np.array([old_root_key, sep_key], dtype=np.uint64)
            children = np.array([pack_addr(self.root), child_addr], dtype=np.uint64)
            ctx.write(self.store, root_blk, self._inner_block(keys, children))
            self.root = root_blk
            self.height += 1
            self.store.root_addr = pack_addr(root_blk)
            if self.hybrid_pin:
                self.store.pin_blocks([root_blk])
            return
        blk, idx = path[-1]
        data = ctx.read(self.store, blk)
        keys, children = self._parse_inner(data)
        nkeys = np.insert(keys, idx + 1, np.uint64(sep_key))
        nchildren = np.insert(children, idx + 1, np.uint64(child_addr))
        if nkeys.size <= self.inner_cap:
            ctx.write(self.store, blk, self._inner_block(nkeys, nchildren))
            if self.hybrid_pin:
                self.store.pin_blocks([blk])
            return
        mid = nkeys.size // 2
        new_blk = self.store.allocate()
        ctx.write(self.store, blk, self._inner_block(nkeys[:mid], nchildren[:mid]))
        ctx.write(self.store, new_blk, self._inner_block(nkeys[mid:], nchildren[mid:]))
        if self.hybrid_pin:
            self.store.pin_blocks([blk, new_blk])
        self._insert_into_parent(path[:-1], int(nkeys[mid]), new_blk, ctx)

    def _subtree_first_key(self, ctx) -> int:
        # first key of the current root (cached in ctx from the descent)
        data = ctx.read(self.store, self.root)
        if self.node_kind(data) == LEAF:
            keys, _, _, _ = self._parse_leaf(data)
        else:
            keys, _ = self._parse_inner(data)
        return int(keys[0])

    # ------------------------------------------------------------------
    # scans

    def scan(self, start_key: int, count: int, ctx: OpContext):
        """Up to ``count`` (key, value-row) pairs with key >= start_key."""
        out_keys: list[int] = []
        out_rows: list[bytes] = []
        if self.root == 0 or count < 1:
            return out_keys, out_rows
        blk, data, _ = self._descend_tagged(start_key, ctx)
        keys, rows, _, right = self._parse_leaf(data)
        idx = int(np.searchsorted(keys, np.uint64(start_key), side="left"))
        while len(out_keys) < count:
            take = min(keys.size - idx, count - len(out_keys))
            if take > 0:
                out_keys.extend(int(k) for k in keys[idx:idx + take])
                out_rows.extend(rows[i].tobytes() for i in range(idx, idx + take))
            if len(out_keys) >= count or right == 0:
                break
            ctx.category = self.leaf_category
            data = ctx.read(self.store, right >> 32)
            keys, rows, _, right = self._parse_leaf(data)
            idx = 0
        return out_keys, out_rows

    # ------------------------------------------------------------------
    # maintenance / audits

    def iter_leaves(self):
        """Yield (block, keys, rows) left to right, bypassing the counters."""
        if self.root == 0:
            return
        blk = self.root
        while True:
            data = self.store.peek_block(blk)
            if self.node_kind(data) == LEAF:
                break
            _, children = self._parse_inner(data)
            blk = int(children[0]) >> 32
        while True:
            data = self.store.peek_block(blk)
            keys, rows, _, right = self._parse_leaf(data)
            yield blk, keys, rows
            if right == 0:
                break
            blk = right >> 32

    def inner_blocks(self) -> list[int]:
        if self.root == 0 or self.height <= 1:
            return []
        out = []
        frontier = [(self.root, 1)]
        while frontier:
            blk, depth = frontier.pop()
            if depth >= self.height:
                continue
            out.append(blk)
            data = self.store.peek_block(blk)
            if self.node_kind(data) == INNER:
                _, children = self._parse_inner(data)
                if depth + 1 < self.height:
                    frontier.extend((int(c) >> 32, depth + 1) for c in children)
        return out

    def leaf_depths(self) -> set[int]:
        if self.root == 0:
            return set()
        depths = set()
        stack = [(self.root, 1)]
        while stack:
            blk, d = stack.pop()
            data = self.store.peek_block(blk)
            if self.node_kind(data) == LEAF:
                depths.add(d)
            else:
                _, children = self._parse_inner(data)
                stack.extend((int(c) >> 32, d + 1) for c in children)
        return depths

    def pin_levels(self, leaves_too: bool = False) -> None:
        self.store.pin_blocks(self.inner_blocks())
        if leaves_too:
            self.store.pin_blocks(blk for blk, _, _ in self.iter_leaves())
        self.hybrid_pin = True
        self.pin_leaves = leaves_too

    def state(self) -> tuple[int, int, int]:
        return self.root, self.height, self.count

    def restore(self, root: int, height: int, count: int) -> None:
        self.root, self.height, self.count = root, height, count


class BPTreeIndex(DiskIndex):
    """Benchmark-facing B+-tree with u64 payloads."""

    kind = "bptree"
    _STATE = struct.Struct("<QQQ")

    def __init__(self, store: BlockStore, fill: float = 0.8):
        super().__init__()
        self.store = store
        self.tree = BPlusTree(store, value_size=8, fill=fill)
        if store.meta_extra:
            root, height, count = self._STATE.unpack(store.meta_extra)
            self.tree.restore(root, height, count)

    @classmethod
    def create(cls, path, block_size=4096, buffer=None, fill=0.8, **_):
        store = BlockStore.create(path, block_size, buffer=buffer, kind=KIND_BPTREE)
        return cls(store, fill)

    @classmethod
    def open(cls, path, block_size=4096, buffer=None, fill=0.8, **_):
        store = BlockStore.open(path, block_size, buffer=buffer, kind=KIND_BPTREE)
        return cls(store, fill)

    def stores(self):
        return [self.store]

    def flush(self):
        self.store.meta_extra = self._STATE.pack(*self.tree.state())
        super().flush()

    def close(self):
        self.store.meta_extra = self._STATE.pack(*self.tree.state())
        super().close()

    def bulk_load(self, keys, payloads):
        self.tree.bulk_load(as_u64(keys), u64_rows(payloads))
        self.flush()

    def lookup(self, key: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        raw = self.tree.lookup(key, ctx)
        return None if raw is None else int(np.frombuffer(raw, "<u8")[0])

    def insert(self, key: int, payload: int):
        ctx = self.begin_op()
        before = self.tree.smo_events
        self.tree.insert(key, np.uint64(payload).tobytes(), ctx)
        self.smo_count += self.tree.smo_events - before

    def scan(self, start_key: int, count: int):
        ctx = self.begin_op()
        ctx.phase = "search"
        keys, rows = self.tree.scan(start_key, count, ctx)
        return [(k, int(np.frombuffer(r, "<u8")[0])) for k, r in zip(keys, rows)]

    def enable_hybrid(self):
        self.hybrid = True
        self.tree.pin_levels()

    def cost_params(self):
        branch = max(2, math.ceil(self.tree.fill * min(self.tree.leaf_cap, self.tree.inner_cap)))
        return {
            "n": max(self.tree.count, 1),
            "branch": branch,
            "rec_per_block": self.store.block_size // 16,
        }
