import os

import numpy as np
import pytest

from diskidx.blockstore import (
    AddressError,
    BlockBuffer,
    BlockStore,
    ConfigError,
    FormatError,
    OpContext,
    SizeError,
    pack_addr,
    unpack_addr,
)


def make_block(store, fill):
    return bytes([fill]) * store.block_size


def test_fresh_store_state(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    assert s.allocated == 1
    st = s.io_stats()
    assert (st.blocks_read, st.blocks_written, st.buffer_hits) == (0, 0, 0)
    s.close()


def test_large_block_size(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 16384, 0)
    assert s.block_size == 16384
    b = s.allocate()
    s.write_block(b, make_block(s, 7))
    assert s.read_block(b) == make_block(s, 7)
    s.close()


def test_block_size_mismatch(tmp_path):
    path = tmp_path / "a.idx"
    BlockStore.open(path, 4096, 0).close()
    with pytest.raises(ConfigError):
        BlockStore.open(path, 8192, 0)


def test_invalid_block_size(tmp_path):
    with pytest.raises(ConfigError):
        BlockStore.open(tmp_path / "a.idx", 1234, 0)


def test_corrupt_meta(tmp_path):
    path = tmp_path / "a.idx"
    with open(path, "wb") as f:
        f.write(b"garbage!" * 512)
    with pytest.raises(FormatError):
        BlockStore.open(path, 4096, 0)


def test_read_your_write_and_reopen(tmp_path):
    path = tmp_path / "a.idx"
    s = BlockStore.open(path, 4096, 0)
    blocks = [s.allocate() for _ in range(5)]
    for i, b in enumerate(blocks):
        s.write_block(b, make_block(s, i + 1))
    for i, b in enumerate(blocks):
        assert s.read_block(b) == make_block(s, i + 1)
    s.root_addr = pack_addr(3, 128)
    s.close()

    s2 = BlockStore.open(path, 4096, 0)
    assert s2.allocated == 6
    assert unpack_addr(s2.root_addr) == (3, 128)
    for i, b in enumerate(blocks):
        assert s2.read_block(b) == make_block(s, i + 1)
    s2.close()


def test_counters_without_buffer(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate()
    s.write_block(b, make_block(s, 1))
    s.read_block(b)
    s.read_block(b)
    st = s.io_stats()
    assert st.blocks_read == 2
    assert st.buffer_hits == 0
    assert st.blocks_written == 1


def test_write_counter(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate(10)
    for i in range(10):
        s.write_block(b + i, make_block(s, i))
    assert s.io_stats().blocks_written == 10


def test_lru_hit(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, buffer_capacity=1)
    b = s.allocate()
    s.write_block(b, make_block(s, 9))
    s.reset_stats()
    s.read_block(b)
    s.read_block(b)
    st = s.io_stats()
    assert st.blocks_read == 1
    assert st.buffer_hits == 1


def test_lru_law(tmp_path):
    cap = 4
    s = BlockStore.open(tmp_path / "a.idx", 4096, buffer_capacity=cap)
    first = s.allocate(cap + 1)
    for i in range(cap + 1):
        s.write_block(first + i, make_block(s, i))
    s.reset_stats()

    # cyclic pattern over cap distinct blocks: all hits after the first pass
    for _ in range(3):
        for i in range(cap):
            s.read_block(first + i)
    st = s.io_stats()
    assert st.blocks_read == cap
    assert st.buffer_hits == 2 * cap

    # cyclic pattern over cap+1 distinct blocks from a cold cache: zero hits
    s.buffer = BlockBuffer(cap)
    s.reset_stats()
    for _ in range(3):
        for i in range(cap + 1):
            s.read_block(first + i)
    st = s.io_stats()
    assert st.buffer_hits == 0
    assert st.blocks_read == 3 * (cap + 1)


def test_buffer_transparency(tmp_path):
    rng = np.random.default_rng(7)
    ops = [(int(rng.integers(0, 20)), int(rng.integers(0, 2))) for _ in range(200)]

    results = []
    for cap in (0, 3):
        s = BlockStore.open(tmp_path / f"t{cap}.idx", 4096, buffer_capacity=cap)
        first = s.allocate(20)
        out = []
        for bno, kind in ops:
            if kind == 0:
                s.write_block(first + bno, bytes([bno]) * 4096)
            else:
                out.append(s.read_block(first + bno))
        results.append(out)
        s.close()
    assert results[0] == results[1]


def test_allocator_contiguous_and_protects_meta(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    a = s.allocate(3)
    assert a == 1  # block 0 is the meta block
    assert s.allocated == 4
    b = s.allocate(1)
    c = s.allocate(1)
    assert (b, c) == (4, 5)


def test_address_and_size_errors(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    with pytest.raises(AddressError):
        s.read_block(5)
    b = s.allocate()
    with pytest.raises(SizeError):
        s.write_block(b, b"short")


def test_reset_then_read(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate()
    s.write_block(b, make_block(s, 1))
    s.reset_stats()
    s.read_block(b)
    st = s.io_stats()
    assert (st.blocks_read, st.blocks_written, st.buffer_hits) == (1, 0, 0)


def test_unwritten_block_reads_zero(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate(2)
    s.write_block(b + 1, make_block(s, 5))
    assert s.read_block(b) == bytes(4096)


def test_op_context_free_rereads(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate(2)
    s.write_block(b, make_block(s, 1))
    s.write_block(b + 1, make_block(s, 2))
    s.reset_stats()
    ctx = OpContext()
    ctx.read(s, b)
    ctx.read(s, b)
    ctx.read(s, b + 1)
    assert s.io_stats().blocks_read == 2
    ctx.write(s, b, make_block(s, 9))
    assert ctx.read(s, b) == make_block(s, 9)
    assert s.io_stats().blocks_read == 2
    assert s.io_stats().blocks_written == 1


def test_op_context_phase_accounting(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate(3)
    for i in range(3):
        s.write_block(b + i, make_block(s, i))
    ctx = OpContext()
    ctx.phase = "search"
    ctx.category = "inner"
    ctx.read(s, b)
    ctx.phase = "insert"
    ctx.category = "leaf"
    ctx.read(s, b + 1)
    ctx.write(s, b + 1, make_block(s, 7))
    assert ctx.reads_by_phase == {"search": 1, "insert": 1}
    assert ctx.writes_by_phase == {"insert": 1}
    assert ctx.reads_by_category == {"inner": 1, "leaf": 1}


def test_pinned_blocks_exempt_from_reads(tmp_path):
    s = BlockStore.open(tmp_path / "a.idx", 4096, 0)
    b = s.allocate(2)
    s.write_block(b, make_block(s, 1))
    s.write_block(b + 1, make_block(s, 2))
    s.pin_blocks([b])
    s.reset_stats()
    assert s.read_block(b) == make_block(s, 1)
    assert s.read_block(b + 1) == make_block(s, 2)
    st = s.io_stats()
    assert st.blocks_read == 1
    assert st.buffer_hits == 1
    # writes to pinned blocks still count and stay visible
    s.write_block(b, make_block(s, 3))
    assert s.read_block(b) == make_block(s, 3)
    assert s.io_stats().blocks_written == 1


def test_shared_buffer_across_stores(tmp_path):
    buf = BlockBuffer(2)
    s1 = BlockStore.open(tmp_path / "a.idx", 4096, buffer=buf)
    s2 = BlockStore.open(tmp_path / "b.idx", 4096, buffer=buf)
    b1 = s1.allocate()
    b2 = s2.allocate()
    s1.write_block(b1, make_block(s1, 1))
    s2.write_block(b2, make_block(s2, 2))
    s1.reset_stats()
    s2.reset_stats()
    s1.read_block(b1)
    s2.read_block(b2)
    s1.read_block(b1)
    s2.read_block(b2)
    assert s1.io_stats().buffer_hits == 1
    assert s2.io_stats().buffer_hits == 1
