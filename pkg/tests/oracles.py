"""Independent reference implementations used to check the real code.

Everything here is deliberately written with different machinery than the
library: the minimal-partition oracle works in (slope, intercept) parameter
space with polygon clipping, the conflict-degree oracle is a histogram
recount, and the index oracle is a plain sorted list.
"""

from __future__ import annotations

import bisect

import numpy as np


# ---------------------------------------------------------------------------
# minimal eps-bounded partition via O(n^2) dynamic programming


def _clip(poly, ca, cb, limit):
    """Keep the polygon region where ca*slope + cb*intercept <= limit."""
    out = []
    n = len(poly)
    for i in range(n):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % n]
        fp = ca * px + cb * py - limit
        fq = ca * qx + cb * qy - limit
        if fp <= 0.0:
            out.append((px, py))
        if (fp < 0.0 < fq) or (fq < 0.0 < fp):
            t = fp / (fp - fq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _reach_table(xs, eps):
    """reach[i] = largest j such that keys[i..j] admit one eps-bounded line."""
    n = xs.size
    reach = np.empty(n, dtype=np.int64)
    for i in range(n):
        x0 = xs[i]
        gaps = np.diff(xs[i:])
        min_gap = gaps.min() if gaps.size else 1.0
        if min_gap <= 0.0:
            min_gap = 1.0  # float-collapsed keys; slope box just needs to be wide
        smax = (n + 2.0 * eps + 2.0) / min_gap + 1.0
        poly = [(-smax, -eps - 1.0), (smax, -eps - 1.0),
                (smax, eps + 1.0), (-smax, eps + 1.0)]
        j = i
        while j < n:
            x = xs[j] - x0
            r = float(j - i)
            clipped = _clip(poly, x, 1.0, r + eps)
            clipped = _clip(clipped, -x, -1.0, -(r - eps))
            if not clipped:
                break
            poly = clipped
            j += 1
        reach[i] = j - 1
    return reach


def dp_min_segments(keys, eps: int) -> int:
    """Minimum number of eps-bounded segments, by interval DP."""
    keys = np.asarray(keys, dtype=np.uint64)
    n = keys.size
    if n == 0:
        return 0
    xs = keys.astype(np.float64)
    reach = _reach_table(xs, float(eps))
    inf = np.iinfo(np.int64).max // 2
    dp = np.full(n + 1, inf, dtype=np.int64)
    dp[0] = 0
    for j in range(1, n + 1):
        ok = reach[:j] >= j - 1
        dp[j] = dp[:j][ok].min() + 1
    return int(dp[n])


# ---------------------------------------------------------------------------
# eps-soundness checker (recomputes predictions exactly as the contract says)


def check_eps_bound(segments, keys, eps: int) -> bool:
    keys = np.asarray(keys, dtype=np.uint64)
    pos = 0
    for seg in segments:
        sub = keys[pos:pos + seg.count].astype(np.float64)
        if int(keys[pos]) != seg.first_key:
            return False
        pred = np.clip(np.floor(seg.model.slope * sub + seg.model.intercept),
                       0, seg.count - 1)
        err = np.abs(pred - np.arange(seg.count))
        if (err > eps).any():
            return False
        pos += seg.count
    return pos == keys.size


# ---------------------------------------------------------------------------
# conflict degree oracles


def histogram_degree(slope, intercept, keys, slot_count) -> int:
    counts: dict[int, int] = {}
    for k in np.asarray(keys, dtype=np.uint64):
        pos = int(np.floor(slope * float(k) + intercept))
        pos = min(max(pos, 0), slot_count - 1)
        counts[pos] = counts.get(pos, 0) + 1
    return max(counts.values()) if counts else 0


def grid_min_degree(keys, slot_count) -> int:
    """Best conflict degree over a dense grid of two-anchor candidates."""
    keys = np.asarray(keys, dtype=np.uint64)
    n = keys.size
    xs = keys.astype(np.float64)
    best = n
    quantiles = sorted({int(round(q * (n - 1))) for q in np.linspace(0, 1, 9)})
    for ii, i in enumerate(quantiles):
        for j in quantiles[ii + 1:]:
            if xs[j] <= xs[i]:
                continue
            for si in np.linspace(0, slot_count * 0.5, 5):
                for sj in np.linspace(slot_count * 0.5, slot_count - 1, 5):
                    if sj <= si:
                        continue
                    slope = (sj - si) / (xs[j] - xs[i])
                    icpt = si - slope * xs[i]
                    best = min(best, histogram_degree(slope, icpt, keys, slot_count))
    return best


# ---------------------------------------------------------------------------
# ordered-map oracle for index behaviour


class MapOracle:
    """Sorted-list reference for lookup/insert/scan semantics (upsert)."""

    def __init__(self):
        self._keys: list[int] = []
        self._vals: dict[int, int] = {}

    def insert(self, key: int, payload: int) -> None:
        if key not in self._vals:
            bisect.insort(self._keys, key)
        self._vals[key] = payload

    def bulk_load(self, keys, payloads) -> None:
        self._keys = [int(k) for k in keys]
        self._vals = {int(k): int(v) for k, v in zip(keys, payloads)}

    def lookup(self, key: int):
        return self._vals.get(key)

    def scan(self, start_key: int, count: int):
        i = bisect.bisect_left(self._keys, start_key)
        out = []
        for k in self._keys[i:i + count]:
            out.append((k, self._vals[k]))
        return out

    def __len__(self):
        return len(self._keys)
