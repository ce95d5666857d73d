"""Disk-resident ordered indexes with exact block I/O accounting.

A B+-tree baseline and four learned indexes (FITing-tree, PGM, ALEX, LIPP)
share one instrumented block store; the ``bench`` CLI replays workloads over
them and reports block counts, cost-bound checks, and profiling tables.
"""

from .blockstore import BlockBuffer, BlockStore, IoStats, OpContext
from .model import (
    CapacityError,
    InputError,
    LinearModel,
    SegmentSpec,
    conflict_degree,
    fmcd_fit,
    greedy_pla,
    optimal_pla,
)

__all__ = [
    "BlockBuffer",
    "BlockStore",
    "IoStats",
    "OpContext",
    "CapacityError",
    "InputError",
    "LinearModel",
    "SegmentSpec",
    "conflict_degree",
    "fmcd_fit",
    "greedy_pla",
    "optimal_pla",
]
