"""Shared plumbing for the disk index implementations."""

from __future__ import annotations

import numpy as np

from .blockstore import BlockStore, IoStats, OpContext


def as_u64(arr) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr, dtype=np.uint64))


class DiskIndex:
    """Common surface of the five index kinds.

    Subclasses implement ``bulk_load``, ``lookup``, ``insert``, ``scan`` and
    ``enable_hybrid``; everything here is bookkeeping over their stores.
    """

    kind = "base"

    def __init__(self):
        self.smo_count = 0
        self.hybrid = False
        self.last_ctx: OpContext | None = None

    def stores(self) -> list[BlockStore]:
        raise NotImplementedError

    def begin_op(self) -> OpContext:
        ctx = OpContext()
        self.last_ctx = ctx
        return ctx

    def io_stats(self) -> IoStats:
        total = IoStats()
        for s in self.stores():
            st = s.stats
            total.blocks_read += st.blocks_read
            total.blocks_written += st.blocks_written
            total.buffer_hits += st.buffer_hits
        return total

    def reset_stats(self) -> None:
        for s in self.stores():
            s.reset_stats()

    @property
    def storage_bytes(self) -> int:
        return sum(s.storage_bytes for s in self.stores())

    @property
    def pinned_bytes(self) -> int:
        return sum(s.pinned_bytes for s in self.stores())

    def flush(self) -> None:
        for s in self.stores():
            s.flush_meta()

    def close(self) -> None:
        for s in self.stores():
            s.close()

    def enable_hybrid(self) -> None:
        raise NotImplementedError(f"{self.kind} does not support hybrid mode")

    def cost_params(self) -> dict:
        """Live parameters for the analytic worst-case bounds."""
        raise NotImplementedError

    # ------------------------------------------------------------------
    # default bulk API over (keys, payloads) u64 arrays

    def bulk_load(self, keys, payloads) -> None:
        raise NotImplementedError

    def lookup(self, key: int):
        raise NotImplementedError

    def insert(self, key: int, payload: int) -> None:
        raise NotImplementedError

    def scan(self, start_key: int, count: int) -> list[tuple[int, int]]:
        raise NotImplementedError
