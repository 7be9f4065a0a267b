"""Fenwick decomposition of a token prefix and the per-head level store.

A prefix of ``n`` tokens splits into one bucket per set bit of ``n``; the
bucket for bit ``l`` holds ``2**l`` consecutive tokens and buckets are laid
out largest first. Level 0 is therefore the finest, most recent bucket.

>>> [(b.level, b.start, b.end) for b in partition(13).buckets]
[(3, 0, 8), (2, 8, 12), (0, 12, 13)]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Bucket:
    level: int
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class BucketPartition:
    n: int
    buckets: tuple[Bucket, ...]

    @property
    def levels(self) -> list[int]:
        return sorted(b.level for b in self.buckets)


def num_levels(t_max: int) -> int:
    """Level slots needed for prefixes up to ``t_max`` (floor(log2 t_max) + 1)."""
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    return int(t_max).bit_length()


def partition(n: int) -> BucketPartition:
    if n < 1:
        raise ValueError(f"empty prefix has no partition (n={n})")
    buckets = []
    offset = 0
    for level in range(n.bit_length() - 1, -1, -1):
        if n >> level & 1:
            buckets.append(Bucket(level, offset, offset + (1 << level)))
            offset += 1 << level
    return BucketPartition(n, tuple(buckets))


def active_levels(n: int) -> list[int]:
    """Set bits of ``n``, ascending."""
    if n < 1:
        raise ValueError(f"no active levels for n={n}")
    return [lvl for lvl in range(n.bit_length()) if n >> lvl & 1]


def active_mask(seq_len: int, n_levels: int) -> np.ndarray:
    """0/1 array of shape (seq_len, n_levels); row t marks the levels of t+1."""
    n = np.arange(1, seq_len + 1)[:, None]
    return (n >> np.arange(n_levels)[None, :] & 1).astype(np.float64)


def level_matrix(seq_len: int) -> np.ndarray:
    """Level of token ``i`` inside ``partition(t + 1)``, or -1 when ``i > t``.

    Token ``i`` sits in the bucket of the highest bit where ``i`` and
    ``t + 1`` differ.
    """
    t = np.arange(seq_len)[:, None] + 1
    i = np.arange(seq_len)[None, :]
    _, bit_length = np.frexp((t ^ i).astype(np.float64))
    return np.where(i < t, bit_length - 1, -1).astype(np.int64)


def _outer(k, v):
    return k.reshape(k.shape + (1,)) * v.reshape(v.shape[:-1] + (1, v.shape[-1]))


class HierarchicalMemory:
    """Binary-counter store of Fenwick bucket states.

    ``levels[l]`` holds the sum of ``k_i v_i^T`` over the bucket for bit ``l``
    of ``n`` and is ``None`` when that bit is clear. Works on numpy arrays and
    on autodiff tensors alike (anything with ``reshape``, ``*`` and ``+``);
    leading batch dimensions are carried through.
    """

    def __init__(self, d_k: int, d_v: int, max_tokens: int):
        self.d_k = d_k
        self.d_v = d_v
        self.max_tokens = max_tokens
        self.levels: list = [None] * num_levels(max_tokens)
        self.n = 0
        self.merges = 0
        self.reads = 0

    def append(self, k, v) -> None:
        if self.n >= self.max_tokens:
            raise ValueError(f"memory is full ({self.max_tokens} tokens)")
        if k.shape[-1] != self.d_k or v.shape[-1] != self.d_v:
            raise ValueError(
                f"expected key dim {self.d_k} and value dim {self.d_v}, got {k.shape} and {v.shape}"
            )
        carry = _outer(k, v)
        lvl = 0
        while self.n >> lvl & 1:
            carry = carry + self.levels[lvl]
            self.levels[lvl] = None
            self.merges += 1
            lvl += 1
        self.levels[lvl] = carry
        self.n += 1

    def active_levels(self) -> list[int]:
        return active_levels(self.n)

    def read_level(self, level: int):
        if not 0 <= level < len(self.levels) or self.levels[level] is None:
            raise KeyError(f"level {level} is inactive at n={self.n}")
        self.reads += 1
        return self.levels[level]

    def total(self):
        """Sum of all present states (the full prefix outer-product sum)."""
        states = [s for s in self.levels if s is not None]
        out = states[0]
        for s in states[1:]:
            out = out + s
        return out
