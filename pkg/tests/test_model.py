import numpy as np
import pytest

from diskidx.model import (
    CapacityError,
    InputError,
    LinearModel,
    conflict_degree,
    fmcd_fit,
    greedy_pla,
    optimal_pla,
)

from oracles import check_eps_bound, dp_min_segments, grid_min_degree, histogram_degree


def random_keys(rng, n, hardness="mixed"):
    if hardness == "uniform":
        keys = rng.integers(0, 2**50, size=2 * n, dtype=np.uint64)
    elif hardness == "clustered":
        centers = rng.integers(0, 2**40, size=max(2, n // 50), dtype=np.uint64)
        offs = rng.integers(0, 5000, size=2 * n, dtype=np.uint64)
        keys = centers[rng.integers(0, len(centers), size=2 * n)] + offs
    else:
        keys = rng.integers(0, 2**30, size=2 * n, dtype=np.uint64)
    keys = np.unique(keys)
    if keys.size > n:
        keys = keys[:n]
    return keys


@pytest.mark.parametrize("n", [2, 10, 1000])
@pytest.mark.parametrize("eps", [1, 8])
def test_linear_keys_single_segment(n, eps):
    keys = np.arange(n, dtype=np.uint64)
    segs = optimal_pla(keys, eps)
    assert len(segs) == 1
    assert segs[0].count == n
    assert check_eps_bound(segs, keys, eps)
    assert len(greedy_pla(keys, eps)) == 1


def test_empty_input():
    assert optimal_pla(np.array([], dtype=np.uint64), 4) == []
    assert greedy_pla(np.array([], dtype=np.uint64), 4) == []


def test_input_errors():
    with pytest.raises(InputError):
        optimal_pla(np.array([3, 2, 1], dtype=np.uint64), 4)
    with pytest.raises(InputError):
        optimal_pla(np.array([1, 1, 2], dtype=np.uint64), 4)
    with pytest.raises(ValueError):
        optimal_pla(np.array([1, 2], dtype=np.uint64), 0)


def test_optimal_matches_dp_oracle_small():
    rng = np.random.default_rng(42)
    for trial in range(12):
        n = int(rng.integers(30, 300))
        keys = random_keys(rng, n)
        for eps in (1, 2, 4):
            got = len(optimal_pla(keys, eps))
            want = dp_min_segments(keys, eps)
            assert got == want, f"trial={trial} eps={eps} n={keys.size}"


def test_optimal_le_greedy_and_sound():
    rng = np.random.default_rng(1)
    for hardness in ("uniform", "clustered", "mixed"):
        keys = random_keys(rng, 1000, hardness)
        for eps in (2, 4, 16):
            opt = optimal_pla(keys, eps)
            gre = greedy_pla(keys, eps)
            assert sum(s.count for s in opt) == keys.size
            assert sum(s.count for s in gre) == keys.size
            assert len(opt) <= len(gre)
            assert check_eps_bound(opt, keys, eps)
            assert check_eps_bound(gre, keys, eps)


def test_monotone_in_eps():
    rng = np.random.default_rng(3)
    keys = random_keys(rng, 5000, "clustered")
    counts = [len(optimal_pla(keys, e)) for e in (2, 4, 8, 16, 64, 256)]
    assert counts == sorted(counts, reverse=True)


def test_segmented_linear_ground_truth():
    # s exactly-linear pieces with distinct slopes: at most s segments
    rng = np.random.default_rng(5)
    pieces = 7
    keys = []
    base = 0
    for p in range(pieces):
        step = int(rng.integers(1, 50)) * (p + 1)
        n = int(rng.integers(100, 300))
        keys.extend(range(base, base + n * step, step))
        base = keys[-1] + int(rng.integers(10**6, 10**7))
    keys = np.array(keys, dtype=np.uint64)
    segs = optimal_pla(keys, 2)
    assert len(segs) <= pieces
    assert check_eps_bound(segs, keys, 2)


def test_float_collapsed_keys_are_chunked():
    # adjacent u64 keys near 2^63 collapse to identical float64 images
    base = np.uint64(2**63)
    keys = base + np.arange(100, dtype=np.uint64)
    eps = 4
    segs = optimal_pla(keys, eps)
    assert check_eps_bound(segs, keys, eps)
    assert sum(s.count for s in segs) == keys.size


def test_first_keys_match():
    rng = np.random.default_rng(8)
    keys = random_keys(rng, 500)
    segs = optimal_pla(keys, 4)
    pos = 0
    for s in segs:
        assert s.first_key == int(keys[pos])
        pos += s.count


# ---------------------------------------------------------------------------
# FMCD


def test_fmcd_identity_mapping():
    keys = np.arange(64, dtype=np.uint64)
    model, degree = fmcd_fit(keys, 64)
    assert degree == 1
    assert conflict_degree(model, keys, 64) == 1


def test_fmcd_degree_matches_recount():
    rng = np.random.default_rng(11)
    for _ in range(10):
        keys = np.unique(rng.integers(0, 10**9, size=200, dtype=np.uint64))
        slots = 2 * keys.size
        model, degree = fmcd_fit(keys, slots)
        assert degree == conflict_degree(model, keys, slots)
        assert degree == histogram_degree(model.slope, model.intercept, keys, slots)
        assert degree >= 1


def test_fmcd_near_optimal_small():
    rng = np.random.default_rng(13)
    for _ in range(8):
        n = int(rng.integers(8, 64))
        keys = np.unique(rng.integers(0, 10**6, size=n, dtype=np.uint64))
        slots = int(rng.integers(keys.size, 256))
        _, degree = fmcd_fit(keys, slots)
        assert degree <= grid_min_degree(keys, slots) + 1


def test_fmcd_capacity_error():
    with pytest.raises(CapacityError):
        fmcd_fit(np.arange(10, dtype=np.uint64), 5)


def test_fmcd_trivial_sizes():
    model, degree = fmcd_fit(np.array([], dtype=np.uint64), 10)
    assert degree == 0
    model, degree = fmcd_fit(np.array([42], dtype=np.uint64), 8)
    assert degree == 1
    assert model.predict(42, 8) in range(8)


def test_conflict_degree_edges():
    keys = np.arange(10, dtype=np.uint64)
    # all keys to one slot
    assert conflict_degree(LinearModel(0.0, 0.0), keys, 16) == 10
    # spread across distinct slots
    assert conflict_degree(LinearModel(1.0, 0.0), keys, 16) == 1


def test_predict_clamps():
    m = LinearModel(1.0, 0.0)
    assert m.predict(1000, 10) == 9
    m2 = LinearModel(-5.0, 0.0)
    assert m2.predict(10, 10) == 0
