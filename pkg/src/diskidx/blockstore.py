"""File-backed block storage with exact I/O accounting.

Every index in this package persists itself through a BlockStore: a flat
file of fixed-size blocks with block 0 reserved as the meta block. The
store counts every block read and written, which is the primary metric
reported by the benchmark harness. An optional LRU buffer (shared between
the files of one index) can be layered on top; with the default capacity
of 0 every access goes to disk.

The meta block is held in main memory while the store is open and its
reads/writes are exempt from the counters; it is flushed on close().

Layout of the meta block (little-endian):
  magic(4s) | version(u32) | block_size(u32) | allocated(u64) |
  root DiskAddr(u64) | kind(u32) | extra_len(u32) | extra bytes
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

MAGIC = b"LIX1"
VERSION = 1
VALID_BLOCK_SIZES = (4096, 8192, 16384)

RECORD_SIZE = 16  # key u64 + payload u64
# 2**64 - 1 is reserved: it pads partially filled sorted record blocks and
# can never be a key (the payload convention key+1 would overflow anyway).
KEY_SENTINEL = 0xFFFFFFFFFFFFFFFF

_META_FMT = "<4sIIQQII"
_META_SIZE = struct.calcsize(_META_FMT)

# Index kind tags recorded in the meta block.
KIND_GENERIC = 0
KIND_BPTREE = 1
KIND_FITING = 2
KIND_PGM = 3
KIND_PGM_RUN = 4
KIND_ALEX_INNER = 5
KIND_ALEX_DATA = 6
KIND_LIPP = 7


class StoreError(Exception):
    """Base class for block store failures."""


class FormatError(StoreError):
    """The backing file is not a valid store (bad magic, truncated meta)."""


class ConfigError(StoreError):
    """The requested configuration conflicts with the on-disk state."""


class AddressError(StoreError):
    """A block number outside the allocated range was addressed."""


class SizeError(StoreError):
    """A read/write payload does not span exactly one block."""


def pack_addr(block_no: int, offset: int = 0) -> int:
    """Pack a (block, offset) disk address into a u64."""
    return (block_no << 32) | offset


def unpack_addr(addr: int) -> tuple[int, int]:
    return addr >> 32, addr & 0xFFFFFFFF


NULL_ADDR = pack_addr(0, 0)  # block 0 is the meta block, so 0 means "none"


@dataclass
class IoStats:
    blocks_read: int = 0
    blocks_written: int = 0
    buffer_hits: int = 0

    def copy(self) -> "IoStats":
        return IoStats(self.blocks_read, self.blocks_written, self.buffer_hits)

    def __sub__(self, other: "IoStats") -> "IoStats":
        return IoStats(
            self.blocks_read - other.blocks_read,
            self.blocks_written - other.blocks_written,
            self.buffer_hits - other.buffer_hits,
        )


class BlockBuffer:
    """LRU cache of whole blocks, shared by all files of one index.

    Entries are keyed by (store id, block number). Write-through: a write
    refreshes a resident entry but never inserts a new one.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("buffer capacity must be >= 0")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[int, int], bytes] = OrderedDict()

    def get(self, key: tuple[int, int]) -> bytes | None:
        data = self._entries.get(key)
        if data is not None:
            self._entries.move_to_end(key)
        return data

    def put(self, key: tuple[int, int], data: bytes) -> None:
        if self.capacity == 0:
            return
        if key in self._entries:
            self._entries.move_to_end(key)
        self._entries[key] = data
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def refresh(self, key: tuple[int, int], data: bytes) -> None:
        if key in self._entries:
            self._entries[key] = data
            self._entries.move_to_end(key)


class BlockStore:
    """One flat file of fixed-size blocks with a meta block at block 0."""

    _next_id = 0

    def __init__(self, path, block_size: int, buffer: BlockBuffer | None,
                 create: bool, kind: int = KIND_GENERIC):
        if block_size not in VALID_BLOCK_SIZES:
            raise ConfigError(f"unsupported block size {block_size}")
        self.path = os.fspath(path)
        self.block_size = block_size
        self.buffer = buffer
        self.stats = IoStats()
        self.pinned: dict[int, bytes] = {}
        self.auto_pin = False
        self._id = BlockStore._next_id
        BlockStore._next_id += 1

        if create:
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC)
            self.allocated = 1
            self.root_addr = NULL_ADDR
            self.kind = kind
            self.meta_extra = b""
            self.flush_meta()
        else:
            self._fd = os.open(self.path, os.O_RDWR)
            raw = os.pread(self._fd, self.block_size, 0)
            if len(raw) < _META_SIZE:
                raise FormatError(f"{self.path}: truncated meta block")
            magic, version, bs, allocated, root, kind, extra_len = struct.unpack_from(_META_FMT, raw, 0)
            if magic != MAGIC:
                raise FormatError(f"{self.path}: bad magic {magic!r}")
            if version != VERSION:
                raise FormatError(f"{self.path}: unsupported version {version}")
            if bs != block_size:
                raise ConfigError(f"{self.path}: block size is {bs}, requested {block_size}")
            if _META_SIZE + extra_len > len(raw):
                raise FormatError(f"{self.path}: corrupt meta extra region")
            self.allocated = allocated
            self.root_addr = root
            self.kind = kind
            self.meta_extra = bytes(raw[_META_SIZE:_META_SIZE + extra_len])

    # ------------------------------------------------------------------
    # opening

    @classmethod
    def open(cls, path, block_size: int = 4096, buffer_capacity: int = 0,
             buffer: BlockBuffer | None = None, kind: int = KIND_GENERIC) -> "BlockStore":
        """Open an existing store (validating its meta block) or create one."""
        if buffer is None:
            buffer = BlockBuffer(buffer_capacity)
        create = not os.path.exists(path)
        return cls(path, block_size, buffer, create=create, kind=kind)

    @classmethod
    def create(cls, path, block_size: int = 4096, buffer_capacity: int = 0,
               buffer: BlockBuffer | None = None, kind: int = KIND_GENERIC) -> "BlockStore":
        """Create a fresh store, truncating any existing file."""
        if buffer is None:
            buffer = BlockBuffer(buffer_capacity)
        return cls(path, block_size, buffer, create=True, kind=kind)

    # ------------------------------------------------------------------
    # block I/O

    def read_block(self, block_no: int) -> bytes:
        if block_no < 0 or block_no >= self.allocated:
            raise AddressError(f"block {block_no} out of range (allocated={self.allocated})")
        pinned = self.pinned.get(block_no)
        if pinned is not None:
            self.stats.buffer_hits += 1
            return pinned
        key = (self._id, block_no)
        if self.buffer is not None:
            cached = self.buffer.get(key)
            if cached is not None:
                self.stats.buffer_hits += 1
                return cached
        data = os.pread(self._fd, self.block_size, block_no * self.block_size)
        if len(data) < self.block_size:
            # Allocated but never written: logically a zero block.
            data = data + bytes(self.block_size - len(data))
        self.stats.blocks_read += 1
        if self.buffer is not None:
            self.buffer.put(key, data)
        return data

    def write_block(self, block_no: int, data: bytes) -> None:
        if block_no < 0 or block_no >= self.allocated:
            raise AddressError(f"block {block_no} out of range (allocated={self.allocated})")
        if len(data) != self.block_size:
            raise SizeError(f"payload of {len(data)} bytes, block size is {self.block_size}")
        data = bytes(data)
        os.pwrite(self._fd, data, block_no * self.block_size)
        self.stats.blocks_written += 1
        if block_no in self.pinned or (self.auto_pin and block_no != 0):
            self.pinned[block_no] = data
        if self.buffer is not None:
            self.buffer.refresh((self._id, block_no), data)

    def allocate(self, n: int = 1) -> int:
        """Reserve n contiguous new blocks; returns the first block number."""
        if n < 1:
            raise ValueError("must allocate at least one block")
        first = self.allocated
        self.allocated += n
        return first

    def peek_block(self, block_no: int) -> bytes:
        """Uncounted raw read, for audits and hybrid-mode pinning walks."""
        pinned = self.pinned.get(block_no)
        if pinned is not None:
            return pinned
        data = os.pread(self._fd, self.block_size, block_no * self.block_size)
        if len(data) < self.block_size:
            data = data + bytes(self.block_size - len(data))
        return data

    # ------------------------------------------------------------------
    # stats

    def io_stats(self) -> IoStats:
        return self.stats.copy()

    def reset_stats(self) -> None:
        self.stats = IoStats()

    @property
    def storage_bytes(self) -> int:
        return self.allocated * self.block_size

    # ------------------------------------------------------------------
    # pinning (hybrid mode: structure held in main memory, reads exempt)

    def pin_blocks(self, block_nos) -> None:
        for bno in block_nos:
            if bno == 0 or bno in self.pinned:
                continue
            data = os.pread(self._fd, self.block_size, bno * self.block_size)
            if len(data) < self.block_size:
                data = data + bytes(self.block_size - len(data))
            self.pinned[bno] = data

    def pin_all(self, auto_pin: bool = True) -> None:
        self.pin_blocks(range(1, self.allocated))
        self.auto_pin = auto_pin

    @property
    def pinned_bytes(self) -> int:
        return len(self.pinned) * self.block_size

    # ------------------------------------------------------------------
    # meta block (memory-resident while open; I/O exempt from counters)

    def flush_meta(self) -> None:
        page = bytearray(self.block_size)
        struct.pack_into(_META_FMT, page, 0, MAGIC, VERSION, self.block_size,
                         self.allocated, self.root_addr, self.kind, len(self.meta_extra))
        page[_META_SIZE:_META_SIZE + len(self.meta_extra)] = self.meta_extra
        os.pwrite(self._fd, bytes(page), 0)

    def close(self) -> None:
        if self._fd >= 0:
            self.flush_meta()
            os.close(self._fd)
            self._fd = -1

    def delete(self) -> None:
        """Close and remove the backing file (LSM runs are reclaimed this way)."""
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1
        os.unlink(self.path)

    def __del__(self):
        try:
            if getattr(self, "_fd", -1) >= 0:
                os.close(self._fd)
        except OSError:
            pass


class OpContext:
    """Per-operation view over one or more stores.

    A block fetched once during an operation stays in hand for the rest of
    that operation, so re-touching it is free; only distinct fetches hit the
    counters. Reads and writes are attributed to the current phase
    ("search", "insert", "smo", "maintenance") and to a node category
    ("inner"/"leaf") for the breakdown reports.
    """

    __slots__ = ("phase", "category", "reads_by_phase", "writes_by_phase",
                 "reads_by_category", "_cache")

    def __init__(self):
        self.phase = "search"
        self.category = "leaf"
        self.reads_by_phase: dict[str, int] = {}
        self.writes_by_phase: dict[str, int] = {}
        self.reads_by_category: dict[str, int] = {}
        self._cache: dict[tuple[int, int], bytes] = {}

    def read(self, store: BlockStore, block_no: int) -> bytes:
        key = (store._id, block_no)
        data = self._cache.get(key)
        if data is not None:
            return data
        before = store.stats.blocks_read
        data = store.read_block(block_no)
        if store.stats.blocks_read != before:
            self.reads_by_phase[self.phase] = self.reads_by_phase.get(self.phase, 0) + 1
            self.reads_by_category[self.category] = self.reads_by_category.get(self.category, 0) + 1
        self._cache[key] = data
        return data

    def write(self, store: BlockStore, block_no: int, data: bytes) -> None:
        store.write_block(block_no, data)
        self.writes_by_phase[self.phase] = self.writes_by_phase.get(self.phase, 0) + 1
        self._cache[(store._id, block_no)] = bytes(data)

    def forget(self, store: BlockStore, block_no: int) -> None:
        self._cache.pop((store._id, block_no), None)
