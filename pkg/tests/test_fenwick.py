import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loglinear_lab.fenwick import (
    HierarchicalMemory,
    active_levels,
    active_mask,
    level_matrix,
    num_levels,
    partition,
)


def naive_buckets(n):
    """Set bits of n read off its binary string, most significant first."""
    bits = bin(n)[2:]
    out, offset = [], 0
    for pos, ch in enumerate(bits):
        if ch == "1":
            lvl = len(bits) - 1 - pos
            out.append((lvl, offset, offset + 2**lvl))
            offset += 2**lvl
    return out


def triples(p):
    return [(b.level, b.start, b.end) for b in p.buckets]


def test_partition_examples():
    assert triples(partition(1)) == [(0, 0, 1)]
    assert triples(partition(13)) == [(3, 0, 8), (2, 8, 12), (0, 12, 13)]


def test_partition_rejects_empty_prefix():
    with pytest.raises(ValueError):
        partition(0)


def test_partition_exhaustive_to_4096():
    for n in range(1, 4097):
        p = partition(n)
        assert triples(p) == naive_buckets(n)
        covered = np.zeros(n, int)
        for b in p.buckets:
            covered[b.start : b.end] += 1
            assert b.size == 2**b.level
        assert np.all(covered == 1)
        sizes = [b.size for b in p.buckets]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        last = p.buckets[-1]
        assert last.start <= n - 1 < last.end
        assert last.level == (n & -n).bit_length() - 1
        assert len(p.buckets) == bin(n).count("1") <= math.floor(math.log2(n)) + 1


def test_active_levels_examples():
    assert active_levels(1) == [0]
    assert active_levels(13) == [0, 2, 3]
    assert active_levels(128) == [7]


@given(st.integers(1, 10**6))
def test_active_levels_match_partition(n):
    assert active_levels(n) == partition(n).levels


def test_num_levels():
    assert num_levels(1) == 1
    assert num_levels(128) == 8
    assert num_levels(512) == 10
    assert num_levels(100) == 7


def test_active_mask_rows_are_set_bits():
    mask = active_mask(70, num_levels(70))
    for t in range(70):
        assert list(np.flatnonzero(mask[t])) == active_levels(t + 1)


def test_level_matrix_matches_partition():
    T = 300
    lvl = level_matrix(T)
    for t in range(T):
        ref = np.full(T, -1)
        for b in partition(t + 1).buckets:
            ref[b.start : b.end] = b.level
        np.testing.assert_array_equal(lvl[t], ref)


# ---------------------------------------------------------------- memory


def rand_kv(n, dk=3, dv=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dk)), rng.normal(size=(n, dv))


def test_first_append():
    k, v = rand_kv(1)
    mem = HierarchicalMemory(3, 2, 8)
    mem.append(k[0], v[0])
    assert mem.n == 1
    np.testing.assert_array_equal(mem.read_level(0), np.outer(k[0], v[0]))


def test_carry_chain_three_to_four():
    k, v = rand_kv(4)
    mem = HierarchicalMemory(3, 2, 8)
    for i in range(3):
        mem.append(k[i], v[i])
    assert mem.active_levels() == [0, 1]
    mem.append(k[3], v[3])
    assert mem.active_levels() == [2]
    assert mem.levels[0] is None and mem.levels[1] is None
    ref = sum(np.outer(k[i], v[i]) for i in range(4))
    np.testing.assert_allclose(mem.read_level(2), ref, atol=1e-12)


def test_incremental_matches_from_scratch_to_256():
    n_max = 256
    k, v = rand_kv(n_max, seed=3)
    mem = HierarchicalMemory(3, 2, n_max)
    running = np.zeros((3, 2))
    for n in range(1, n_max + 1):
        mem.append(k[n - 1], v[n - 1])
        running += np.outer(k[n - 1], v[n - 1])
        present = [lvl for lvl, s in enumerate(mem.levels) if s is not None]
        assert present == active_levels(n)
        for b in partition(n).buckets:
            ref = sum(np.outer(k[i], v[i]) for i in range(b.start, b.end))
            np.testing.assert_allclose(mem.levels[b.level], ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mem.total(), running, atol=1e-12, rtol=0)
        assert len(present) <= math.floor(math.log2(n)) + 1


def test_read_level_examples():
    k, v = rand_kv(12, seed=5)
    mem = HierarchicalMemory(3, 2, 16)
    mem.append(k[0], v[0])
    mem.append(k[1], v[1])
    with pytest.raises(KeyError, match="level 0 is inactive at n=2"):
        mem.read_level(0)
    for i in range(2, 12):
        mem.append(k[i], v[i])
    ref = sum(np.outer(k[i], v[i]) for i in range(8, 12))
    np.testing.assert_allclose(mem.read_level(2), ref, atol=1e-12)
    with pytest.raises(KeyError):
        mem.read_level(9)


def test_merge_count_amortized():
    k, v = rand_kv(1, seed=1)
    for n in (1, 7, 64, 1000, 4096):
        mem = HierarchicalMemory(3, 2, 4096)
        for _ in range(n):
            mem.append(k[0], v[0])
        assert mem.merges <= 2 * n
        # each append merges (trailing ones of the old count) states
        assert mem.merges == sum((i ^ (i + 1)).bit_length() - 1 for i in range(n))


def test_append_checks_dims_and_capacity():
    mem = HierarchicalMemory(3, 2, 2)
    with pytest.raises(ValueError, match="key dim 3"):
        mem.append(np.ones(4), np.ones(2))
    with pytest.raises(ValueError):
        mem.append(np.ones(3), np.ones(5))
    mem.append(np.ones(3), np.ones(2))
    mem.append(np.ones(3), np.ones(2))
    with pytest.raises(ValueError, match="full"):
        mem.append(np.ones(3), np.ones(2))


def test_batched_states():
    rng = np.random.default_rng(0)
    k, v = rng.normal(size=(5, 2, 4, 3)), rng.normal(size=(5, 2, 4, 2))
    mem = HierarchicalMemory(3, 2, 8)
    for i in range(5):
        mem.append(k[i], v[i])
    ref = np.einsum("nbhk,nbhv->bhkv", k[:4], v[:4])
    np.testing.assert_allclose(mem.read_level(2), ref, atol=1e-12)
