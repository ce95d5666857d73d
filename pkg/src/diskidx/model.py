"""Linear-model toolkit for the learned indexes.

Three fitting procedures live here:

* ``optimal_pla``   -- streaming piecewise-linear segmentation that emits the
  minimum possible number of segments for a given rank-error bound. Segments
  are extended greedily while the feasible slope interval (maintained with
  upper/lower convex hulls of the tolerance points) stays non-empty; maximal
  extension of each segment yields a minimal partition.
* ``greedy_pla``    -- the shrinking-cone variant that anchors each segment at
  its first key. Cheaper bookkeeping, never fewer segments than the optimal
  construction.
* ``fmcd_fit``      -- picks a linear model mapping keys into a fixed slot
  array while minimising the conflict degree (the maximum number of keys
  sharing a slot), searched over a family of two-anchor interpolations.

Keys are unsigned 64-bit integers; predictions are computed in float64 as
``floor(slope * key + intercept)`` clamped to the target range. The error
bound is measured in array ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InputError(ValueError):
    """Keys are not strictly increasing."""


class CapacityError(ValueError):
    """Fewer slots than keys to place."""


@dataclass(frozen=True)
class LinearModel:
    slope: float
    intercept: float

    def predict(self, key: int, size: int) -> int:
        """Predicted array position for ``key``, clamped to [0, size)."""
        pos = int(np.floor(self.slope * np.float64(key) + self.intercept))
        if pos < 0:
            return 0
        if pos >= size:
            return size - 1
        return pos

    def predict_array(self, keys: np.ndarray, size: int) -> np.ndarray:
        pos = np.floor(self.slope * keys.astype(np.float64) + self.intercept)
        return np.clip(pos, 0, size - 1).astype(np.int64)


@dataclass(frozen=True)
class SegmentSpec:
    """One key range governed by a linear model predicting local rank."""

    first_key: int
    model: LinearModel
    count: int

    def predict(self, key: int) -> int:
        return self.model.predict(key, self.count)


# ---------------------------------------------------------------------------
# streaming segmentation cores
#
# Both cores work on per-key constraint triples (x, lo, hi): any feasible
# line must pass through [lo, hi] at x. The x values are strictly increasing
# float64 key images; coordinates are rebased to each segment's first x so
# hull arithmetic stays well conditioned for huge keys.


def _optimal_core(xs, los, his, ends, slopes):
    m = xs.shape[0]
    hlx = np.empty(m, np.float64)  # upper hull over (x, lo)
    hly = np.empty(m, np.float64)
    hux = np.empty(m, np.float64)  # lower hull over (x, hi)
    huy = np.empty(m, np.float64)
    nseg = 0
    i = 0
    while i < m:
        xb = xs[i]
        hlx[0] = 0.0
        hly[0] = los[i]
        hux[0] = 0.0
        huy[0] = his[i]
        nl = 1
        nu = 1
        pl = 0
        pu = 0
        slo = -1e300
        shi = 1e300
        j = i + 1
        while j < m:
            xr = xs[j] - xb
            lj = los[j]
            uj = his[j]
            # tightest upper slope bound: min over the lower-point hull
            v = pl
            while v + 1 < nl and (uj - hly[v + 1]) * (xr - hlx[v]) <= (uj - hly[v]) * (xr - hlx[v + 1]):
                v += 1
            while v > 0 and (uj - hly[v - 1]) * (xr - hlx[v]) < (uj - hly[v]) * (xr - hlx[v - 1]):
                v -= 1
            pl = v
            cand_hi = (uj - hly[v]) / (xr - hlx[v])
            # tightest lower slope bound: max over the upper-point hull
            v = pu
            while v + 1 < nu and (lj - huy[v + 1]) * (xr - hux[v]) >= (lj - huy[v]) * (xr - hux[v + 1]):
                v += 1
            while v > 0 and (lj - huy[v - 1]) * (xr - hux[v]) > (lj - huy[v]) * (xr - hux[v - 1]):
                v -= 1
            pu = v
            cand_lo = (lj - huy[v]) / (xr - hux[v])
            nhi = shi if shi < cand_hi else cand_hi
            nlo = slo if slo > cand_lo else cand_lo
            if nlo > nhi:
                break
            slo = nlo
            shi = nhi
            # push (xr, lj) onto the upper hull of lower points
            while nl >= 2:
                ax = hlx[nl - 1] - hlx[nl - 2]
                ay = hly[nl - 1] - hly[nl - 2]
                bx = xr - hlx[nl - 1]
                by = lj - hly[nl - 1]
                if ax * by - ay * bx >= 0.0:
                    nl -= 1
                else:
                    break
            hlx[nl] = xr
            hly[nl] = lj
            nl += 1
            if pl >= nl:
                pl = nl - 1
            # push (xr, uj) onto the lower hull of upper points
            while nu >= 2:
                ax = hux[nu - 1] - hux[nu - 2]
                ay = huy[nu - 1] - huy[nu - 2]
                bx = xr - hux[nu - 1]
                by = uj - huy[nu - 1]
                if ax * by - ay * bx <= 0.0:
                    nu -= 1
                else:
                    break
            hux[nu] = xr
            huy[nu] = uj
            nu += 1
            if pu >= nu:
                pu = nu - 1
            j += 1
        ends[nseg] = j
        if j - i == 1:
            slopes[nseg] = 0.0
        else:
            slopes[nseg] = (slo + shi) * 0.5
        nseg += 1
        i = j
    return nseg


def _greedy_core(xs, los, his, ends, slopes, anchors):
    m = xs.shape[0]
    nseg = 0
    i = 0
    while i < m:
        xb = xs[i]
        y0 = (los[i] + his[i]) * 0.5
        clo = -1e300
        chi = 1e300
        j = i + 1
        while j < m:
            dx = xs[j] - xb
            ilo = (los[j] - y0) / dx
            ihi = (his[j] - y0) / dx
            nlo = clo if clo > ilo else ilo
            nhi = chi if chi < ihi else ihi
            if nlo > nhi:
                break
            clo = nlo
            chi = nhi
            j += 1
        ends[nseg] = j
        if j - i == 1:
            slopes[nseg] = 0.0
        else:
            slopes[nseg] = (clo + chi) * 0.5
        anchors[nseg] = y0
        nseg += 1
        i = j
    return nseg


try:  # pragma: no cover - exercised when numba is installed
    from numba import njit

    _optimal_core = njit(cache=True)(_optimal_core)
    _greedy_core = njit(cache=True)(_greedy_core)
except ImportError:  # pragma: no cover
    pass


def _check_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    if keys.ndim != 1:
        raise InputError("keys must be a one-dimensional sequence")
    if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
        raise InputError("keys must be strictly increasing and unique")
    return keys


def _group_constraints(keys: np.ndarray, eps: int):
    """Collapse keys whose float64 images coincide into interval constraints.

    Returns (xs, los, his, starts) where starts[g] is the global rank of the
    first key in group g. Groups wider than the error bound allows are split
    by the caller; that can only happen for pathologically dense u64 keys.
    """
    xs_all = keys.astype(np.float64)
    ranks = np.arange(keys.size, dtype=np.float64)
    if keys.size == 0:
        return xs_all, ranks, ranks, np.empty(0, np.int64)
    new_group = np.empty(keys.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = xs_all[1:] != xs_all[:-1]
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], keys.size)
    xs = xs_all[starts]
    los = (ends - 1) - float(eps)  # highest rank in group minus eps
    his = starts + float(eps)      # lowest rank in group plus eps
    return xs, los, his, starts.astype(np.int64)


def _finalize_segments(keys, xs_all, seg_bounds, slopes, intercepts, eps):
    """Attach models, verify the rank-error bound, and build SegmentSpecs."""
    segs = []
    for (start, end), slope, icpt in zip(seg_bounds, slopes, intercepts):
        count = end - start
        sub = xs_all[start:end]
        pred = np.clip(np.floor(slope * sub + icpt), 0, count - 1)
        err = np.abs(pred - np.arange(count, dtype=np.float64))
        bad = err > eps
        if bad.any():
            # Recenter the intercept inside the residual envelope; float
            # rounding on conversion out of rebased coordinates can shave an
            # ulp off the fitted margin.
            resid = slope * sub + icpt - np.arange(count, dtype=np.float64)
            icpt -= (resid.max() + resid.min()) * 0.5
            pred = np.clip(np.floor(slope * sub + icpt), 0, count - 1)
            err = np.abs(pred - np.arange(count, dtype=np.float64))
            if (err > eps).any():
                raise RuntimeError("segment fit failed verification")
        segs.append(SegmentSpec(int(keys[start]), LinearModel(float(slope), float(icpt)), count))
    return segs


def _intercept_for(xs_all, los_all, his_all, start, end, slope, xb):
    xr = xs_all[start:end] - xb
    blo = np.max(los_all[start:end] - start - slope * xr)
    bhi = np.min(his_all[start:end] - start - slope * xr)
    b = (blo + bhi) * 0.5
    return b - slope * xb


def _run_pla(keys: np.ndarray, eps: int, greedy: bool) -> list[SegmentSpec]:
    keys = _check_keys(keys)
    if eps < 1:
        raise ValueError("error bound must be >= 1")
    if keys.size == 0:
        return []
    xs, los, his, gstarts = _group_constraints(keys, eps)
    xs_all = keys.astype(np.float64)
    los_all = np.arange(keys.size, dtype=np.float64) - eps
    his_all = np.arange(keys.size, dtype=np.float64) + eps

    segs: list[SegmentSpec] = []
    span_start = 0  # group index where the current well-formed span begins
    g = 0
    ngroups = xs.size
    while g <= ngroups:
        oversize = g < ngroups and los[g] > his[g]
        if g == ngroups or oversize:
            if g > span_start:
                segs.extend(_run_core_span(keys, xs_all, los_all, his_all,
                                           xs, los, his, gstarts,
                                           span_start, g, eps, greedy))
            if oversize:
                # A float-collapsed key group too wide for one model: chunk it
                # into forced segments of at most 2*eps+1 keys.
                lo_rank = int(gstarts[g])
                hi_rank = int(gstarts[g + 1]) if g + 1 < ngroups else keys.size
                step = 2 * eps + 1
                for s in range(lo_rank, hi_rank, step):
                    e = min(s + step, hi_rank)
                    mid = (e - s - 1) / 2.0
                    segs.append(SegmentSpec(int(keys[s]), LinearModel(0.0, mid), e - s))
            span_start = g + 1
        g += 1
    return segs


def _run_core_span(keys, xs_all, los_all, his_all, xs, los, his, gstarts,
                   gfrom, gto, eps, greedy):
    sub_x = np.ascontiguousarray(xs[gfrom:gto])
    sub_lo = np.ascontiguousarray(los[gfrom:gto])
    sub_hi = np.ascontiguousarray(his[gfrom:gto])
    m = sub_x.size
    ends = np.empty(m, np.int64)
    slopes = np.empty(m, np.float64)
    if greedy:
        anchors = np.empty(m, np.float64)
        nseg = _greedy_core(sub_x, sub_lo, sub_hi, ends, slopes, anchors)
    else:
        nseg = _optimal_core(sub_x, sub_lo, sub_hi, ends, slopes)
        anchors = None
    rank_end = int(gstarts[gto]) if gto < gstarts.size else keys.size
    seg_bounds = []
    intercepts = []
    prev = gfrom
    for s in range(nseg):
        gend = gfrom + int(ends[s])
        start = int(gstarts[prev])
        end = int(gstarts[gend]) if gend < gstarts.size else rank_end
        seg_bounds.append((start, end))
        if anchors is None:
            icpt = _intercept_for(xs_all, los_all, his_all, start, end,
                                  float(slopes[s]), xs_all[start])
        else:
            # anchored at the first key: local value anchors[s] - start rank
            icpt = (float(anchors[s]) - start) - float(slopes[s]) * xs_all[start]
        intercepts.append(icpt)
        prev = gend
    return _finalize_segments(keys, xs_all, seg_bounds, slopes[:nseg], intercepts, eps)


def optimal_pla(keys, eps: int) -> list[SegmentSpec]:
    """Minimal eps-bounded piecewise-linear partition of sorted unique keys."""
    return _run_pla(np.asarray(keys), eps, greedy=False)


def greedy_pla(keys, eps: int) -> list[SegmentSpec]:
    """Shrinking-cone segmentation; same bound, possibly more segments."""
    return _run_pla(np.asarray(keys), eps, greedy=True)


# ---------------------------------------------------------------------------
# FMCD: minimum conflict degree fitting


def conflict_degree(model: LinearModel, keys, slot_count: int) -> int:
    """Maximum number of keys the model maps to one slot."""
    keys = np.asarray(keys, dtype=np.uint64)
    if keys.size == 0:
        return 0
    preds = model.predict_array(keys, slot_count)
    _, counts = np.unique(preds, return_counts=True)
    return int(counts.max())


def _candidate_pairs(n: int) -> list[tuple[int, int]]:
    if n <= 128:
        return [(i, j) for i in range(n - 1) for j in range(i + 1, n)]
    fracs = [(0.0, 1.0), (0.01, 0.99), (0.05, 0.95), (0.1, 0.9),
             (0.25, 0.75), (1 / 3, 2 / 3), (0.4, 0.6)]
    pairs = []
    for flo, fhi in fracs:
        i = min(int(flo * (n - 1)), n - 2)
        j = max(int(fhi * (n - 1)), i + 1)
        if (i, j) not in pairs:
            pairs.append((i, j))
    return pairs


def fmcd_fit(keys, slot_count: int) -> tuple[LinearModel, int]:
    """Fit a model into ``slot_count`` slots minimising the conflict degree.

    Searches two-anchor interpolations through key pairs (all pairs for small
    inputs, quantile pairs plus a least-squares line for large ones) and
    returns the model with the smallest degree, ties broken by the number of
    conflicting keys.
    """
    keys = _check_keys(keys)
    n = keys.size
    if slot_count < n:
        raise CapacityError(f"{n} keys will not fit in {slot_count} slots")
    if n == 0:
        return LinearModel(0.0, 0.0), 0
    xs = keys.astype(np.float64)
    if n == 1:
        return LinearModel(0.0, slot_count / 2.0), 1

    targets = (np.arange(n, dtype=np.float64) + 0.5) * (slot_count / n)
    cands: list[LinearModel] = []
    for i, j in _candidate_pairs(n):
        dx = xs[j] - xs[i]
        if dx <= 0.0:
            continue
        slope = (targets[j] - targets[i]) / dx
        cands.append(LinearModel(slope, targets[i] - slope * xs[i]))
    # least-squares over (key, target slot)
    xm = xs.mean()
    tm = targets.mean()
    var = np.sum((xs - xm) ** 2)
    if var > 0.0:
        slope = float(np.sum((xs - xm) * (targets - tm)) / var)
        if slope > 0.0:
            cands.append(LinearModel(slope, tm - slope * xm))

    best = None
    for rank, model in enumerate(cands):
        preds = model.predict_array(keys, slot_count)
        _, counts = np.unique(preds, return_counts=True)
        degree = int(counts.max())
        conflicted = int(counts[counts > 1].sum())
        key = (degree, conflicted, rank)
        if best is None or key < best[0]:
            best = (key, model)
    model = best[1]
    return model, best[0][0]
