"""Packed binary codes and exact Hamming-distance retrieval.

Packing: bit ``i`` of a code lives in bit ``i % 64`` of word ``i // 64``;
``+1`` maps to 1, ``-1`` to 0 and padding bits above ``k`` are zero, so
whole-word XOR + popcount needs no masking.

Code bank file (little-endian): ``b"DMHCODES"``, u32 version, u32 k, u64 n,
u32 C, ``n * ceil(k/64)`` u64 words, ``n * C`` label bytes, ``n`` u64 ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CODES_MAGIC = b"DMHCODES"
CODES_VERSION = 1
_HEADER = struct.Struct("<8sIIQI")


class CodeFormatError(ValueError):
    pass


class BitsMismatchError(ValueError):
    pass


def words_per_code(k: int) -> int:
    return (k + 63) // 64


def pack(codes) -> np.ndarray:
    """Pack ``±1`` codes of shape ``[k]`` or ``[n, k]`` into uint64 words."""
    codes = np.asarray(codes)
    single = codes.ndim == 1
    codes = np.atleast_2d(codes)
    if not np.isin(codes, (-1, 1)).all():
        raise ValueError("codes must contain only -1 and +1")
    n, k = codes.shape
    w = words_per_code(k)
    bits = np.zeros((n, w * 64), dtype=np.uint8)
    bits[:, :k] = codes > 0
    words = np.packbits(bits, axis=1, bitorder="little").view("<u8").astype(np.uint64)
    return words[0] if single else words


def unpack(words, k: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    single = words.ndim == 1
    words = np.atleast_2d(words)
    bits = np.unpackbits(words.astype("<u8").view(np.uint8), axis=1, bitorder="little")
    codes = np.where(bits[:, :k] == 1, 1, -1).astype(np.int8)
    return codes[0] if single else codes


def _padding_mask(k: int) -> np.ndarray:
    w = words_per_code(k)
    mask = np.zeros(w, dtype=np.uint64)
    rem = k - 64 * (w - 1)
    mask[-1] = np.uint64(0xFFFFFFFFFFFFFFFF) if rem == 64 else np.uint64((1 << rem) - 1)
    mask[:-1] = np.uint64(0xFFFFFFFFFFFFFFFF)
    return mask


def popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(x)


def hamming(a, b, k: int) -> int:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape or a.shape[-1] != words_per_code(k):
        raise BitsMismatchError(f"word shapes {a.shape} / {b.shape} do not hold {k}-bit codes")
    return int(popcount(a ^ b).sum())


def inner_product(a, b, k: int) -> int:
    """``<a, b>`` of the ±1 codes behind two packed words, via ``k - 2*hamming``."""
    return k - 2 * hamming(a, b, k)


@dataclass
class RankedList:
    ids: np.ndarray        # uint64
    distances: np.ndarray  # int64

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, s) -> "RankedList":
        return RankedList(self.ids[s], self.distances[s])

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(d)) for i, d in zip(self.ids, self.distances)]


class CodeBank:
    """Immutable store of packed codes with labels and stable ids."""

    def __init__(self, k: int, words, labels=None, ids=None):
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.ndim != 2 or words.shape[1] != words_per_code(k):
            raise CodeFormatError(f"words shape {words.shape} does not hold {k}-bit codes")
        n = words.shape[0]
        if np.any(words & ~_padding_mask(k)):
            raise CodeFormatError("padding bits above k must be zero")
        labels = np.zeros((n, 0), dtype=np.uint8) if labels is None else np.asarray(labels)
        if labels.ndim != 2 or labels.shape[0] != n:
            raise CodeFormatError(f"labels shape {labels.shape} does not match {n} codes")
        ids = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
        if ids.shape != (n,):
            raise CodeFormatError(f"ids shape {ids.shape} does not match {n} codes")
        if np.unique(ids).size != n:
            raise CodeFormatError("ids must be unique")
        self.k = k
        self.words = words
        self.labels = labels.astype(np.uint8)
        self.ids = ids
        for arr in (self.words, self.labels, self.ids):
            arr.setflags(write=False)
        # id order once, so every ranking is a stable sort on distance only
        self._by_id = np.argsort(ids, kind="stable")

    @classmethod
    def from_codes(cls, codes, labels=None, ids=None) -> "CodeBank":
        codes = np.asarray(codes)
        return cls(codes.shape[1], pack(codes), labels, ids)

    def __len__(self) -> int:
        return self.words.shape[0]

    @property
    def n_categories(self) -> int:
        return self.labels.shape[1]

    def codes(self) -> np.ndarray:
        return unpack(self.words, self.k)

    def index_of(self, sample_id: int) -> int:
        hit = np.nonzero(self.ids == np.uint64(sample_id))[0]
        if hit.size == 0:
            raise KeyError(f"id {sample_id} not in bank")
        return int(hit[0])

    def distances(self, query) -> np.ndarray:
        query = np.asarray(query, dtype=np.uint64)
        if query.shape != (words_per_code(self.k),):
            raise BitsMismatchError(f"query words {query.shape} do not hold {self.k}-bit codes")
        return popcount(self.words ^ query).sum(axis=1, dtype=np.int64)

    def __eq__(self, other):
        return (isinstance(other, CodeBank) and self.k == other.k
                and np.array_equal(self.words, other.words)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.ids, other.ids))

    # ------------------------------------------------------------------ io
    def to_bytes(self) -> bytes:
        n = len(self)
        head = _HEADER.pack(CODES_MAGIC, CODES_VERSION, self.k, n, self.n_categories)
        return b"".join([head, self.words.astype("<u8").tobytes(), self.labels.tobytes(),
                         self.ids.astype("<u8").tobytes()])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CodeBank":
        if raw[:8] != CODES_MAGIC:
            raise CodeFormatError("not a DMHCODES file")
        if len(raw) < _HEADER.size:
            raise CodeFormatError("truncated header")
        _, version, k, n, c = _HEADER.unpack_from(raw)
        if version != CODES_VERSION:
            raise CodeFormatError(f"unsupported DMHCODES version {version}")
        if k < 1:
            raise CodeFormatError("k must be >= 1")
        w = words_per_code(k)
        sizes = (8 * n * w, n * c, 8 * n)
        if len(raw) != _HEADER.size + sum(sizes):
            raise CodeFormatError(f"payload is {len(raw) - _HEADER.size} bytes, "
                                  f"expected {sum(sizes)}")
        off = _HEADER.size
        words = np.frombuffer(raw, "<u8", n * w, off).reshape(n, w)
        off += sizes[0]
        labels = np.frombuffer(raw, np.uint8, n * c, off).reshape(n, c)
        if labels.size and labels.max() > 1:
            raise CodeFormatError("label bytes must be 0/1")
        off += sizes[1]
        ids = np.frombuffer(raw, "<u8", n, off)
        return cls(k, words.astype(np.uint64), labels.copy(), ids.astype(np.uint64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodeBank":
        return cls.from_bytes(Path(path).read_bytes())


def rank_rows(query, bank: CodeBank) -> tuple[np.ndarray, np.ndarray]:
    """Bank row indices ordered by ``(distance, id)``, with their distances.

    Distances are integers in ``[0, k]``; a stable sort of small unsigned
    keys over id-ordered rows is numpy's radix path, i.e. a counting sort
    by distance bucket that keeps id order inside each bucket.
    """
    d = bank.distances(query)[bank._by_id]
    key = d.astype(np.uint8 if bank.k < 256 else np.uint16)
    pos = np.argsort(key, kind="stable")
    return bank._by_id[pos], d[pos]


def rank(query, bank: CodeBank) -> RankedList:
    """Every bank item ordered by ascending distance, ties by ascending id."""
    if len(bank) == 0:
        return RankedList(np.zeros(0, np.uint64), np.zeros(0, np.int64))
    rows, d = rank_rows(query, bank)
    return RankedList(bank.ids[rows], d)


def knn(query, bank: CodeBank, topk: int) -> RankedList:
    """First ``min(topk, n)`` entries of :func:`rank` without sorting the whole bank."""
    if topk < 1:
        raise ValueError("topk must be >= 1")
    n = len(bank)
    if n == 0:
        return rank(query, bank)
    topk = min(topk, n)
    d = bank.distances(query)
    counts = np.bincount(d, minlength=bank.k + 1)
    cutoff = int(np.searchsorted(np.cumsum(counts), topk))
    take = np.nonzero(d <= cutoff)[0]
    cand_ids = bank.ids[take]
    order = np.lexsort((cand_ids, d[take]))[:topk]
    return RankedList(cand_ids[order], d[take][order])
