"""Sample-level search over the pool: inverted index, exact top-K by
feature-overlap count, and positive-neighbor selection."""

from __future__ import annotations

import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, Sample


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    neighbor_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __len__(self):
        return len(self.neighbor_ids)


class SearchPoolIndex:
    """Inverted index from feature id to the ascending pool rows holding it.

    Postings are stored CSR-style: rows holding feature ``v`` are
    ``_rows[_starts[v]:_starts[v + 1]]``.  The index never changes after
    construction; ``lookups`` counts queries served.
    """

    def __init__(self, pool: Dataset, k_default: int = 10):
        if len(pool) == 0:
            raise RetrievalError("cannot index an empty pool")
        self.pool = pool
        self.k_default = k_default
        n, nf = pool.features.shape
        flat = pool.features.reshape(-1)
        order = np.argsort(flat, kind="stable")
        self._rows = (order // nf).astype(np.int64)
        counts = np.bincount(flat, minlength=pool.vocab_size)
        self._starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        # composite key rank: higher score first, then older (smaller) row
        self._tiebreak = (n - 1 - np.arange(n)).astype(np.int64)
        for arr in (self._rows, self._starts, self._tiebreak):
            arr.setflags(write=False)
        self._lookups = 0
        self._lock = threading.Lock()

    @property
    def num_fields(self) -> int:
        return self.pool.num_fields

    @property
    def lookups(self) -> int:
        return self._lookups

    def postings(self, feature_id: int) -> np.ndarray:
        """Ascending pool sample ids holding ``feature_id``."""
        if not 0 <= feature_id < self.pool.vocab_size:
            return np.empty(0, dtype=np.int64)
        rows = self._rows[self._starts[feature_id]:self._starts[feature_id + 1]]
        return self.pool.sample_ids[rows]

    def postings_map(self) -> dict[int, list[int]]:
        return {v: self.postings(v).tolist() for v in range(self.pool.vocab_size)
                if self._starts[v + 1] > self._starts[v]}

    def overlap_counts(self, features: Sequence[int]) -> np.ndarray:
        """Per pool row, the number of fields shared with ``features``."""
        with self._lock:
            self._lookups += 1
        vocab = self.pool.vocab_size
        lists = [self._rows[self._starts[v]:self._starts[v + 1]]
                 for v in features if 0 <= v < vocab]
        if not lists:
            return np.zeros(len(self.pool), dtype=np.int64)
        return np.bincount(np.concatenate(lists), minlength=len(self.pool))

    def equals(self, other: "SearchPoolIndex") -> bool:
        return (self.pool.equals(other.pool) and np.array_equal(self._rows, other._rows)
                and np.array_equal(self._starts, other._starts))


def build_index(pool: Dataset, k_default: int = 10) -> SearchPoolIndex:
    return SearchPoolIndex(pool, k_default)


def score(query: Sample, candidate: Sample) -> float:
    """Number of fields on which the two samples carry the same feature id."""
    if len(query.features) != len(candidate.features):
        raise RetrievalError(
            f"field count mismatch: {len(query.features)} vs {len(candidate.features)}")
    return float(sum(a == b for a, b in zip(query.features, candidate.features)))


def _topk_rows(index: SearchPoolIndex, features, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(index.pool)
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    counts = index.overlap_counts(features)
    key = counts * n + index._tiebreak
    if k < n:
        top = np.argpartition(-key, k - 1)[:k]
    else:
        top = np.arange(n)
    rows = top[np.argsort(-key[top])]
    return rows, counts[rows]


def retrieve_topk(index: SearchPoolIndex, query: Sample, k: int | None = None) -> RetrievalResult:
    """Exact top-K pool samples by overlap count; ties go to the older sample.

    Queries overlapping fewer than K pool samples are padded with the oldest
    zero-score samples, so every query gets ``min(K, pool size)`` neighbors.
    """
    k = index.k_default if k is None else k
    if k < 0:
        raise RetrievalError("K must be >= 0")
    if len(query.features) != index.num_fields:
        raise RetrievalError(
            f"field count mismatch: query has {len(query.features)}, pool has {index.num_fields}")
    rows, counts = _topk_rows(index, query.features, k)
    return RetrievalResult(tuple(int(i) for i in index.pool.sample_ids[rows]),
                           tuple(float(c) for c in counts))


def retrieve_rows(index: SearchPoolIndex, features: np.ndarray, k: int,
                  threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Batch retrieval: pool rows (B, K') and scores (B, K') for each query row.

    Parallel mode fans the queries out over threads; output order always
    follows the input.
    """
    k_eff = min(k, len(index.pool))
    b = len(features)
    rows = np.empty((b, k_eff), dtype=np.int64)
    scores = np.empty((b, k_eff), dtype=np.float64)

    def one(i):
        r, c = _topk_rows(index, features[i], k)
        rows[i], scores[i] = r, c

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(one, range(b)))
    else:
        for i in range(b):
            one(i)
    return rows, scores


def select_positive(result: RetrievalResult, strategy: str = "most_related", seed=0) -> int:
    """Pick the contrastive positive among retrieved neighbors.

    ``seed`` may be an int or a sequence of ints (as accepted by
    ``numpy.random.default_rng``).
    """
    if len(result) == 0:
        raise RetrievalError("cannot select a positive from an empty result")
    if strategy == "most_related":
        return result.neighbor_ids[0]
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return result.neighbor_ids[int(rng.integers(len(result)))]
    raise RetrievalError(f"unknown positive-selection strategy {strategy!r}")


# --------------------------------------------------------------------------
# retrieval cache sidecar
#
# Little-endian.  Header: magic b"RKRC", version u32, count u64, K u32.
# Then ``count`` records: sample_id u64, n u32, ids i64[K] (padded -1),
# scores f64[K] (padded 0).

_CACHE_MAGIC = b"RKRC"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIQI")


@dataclass
class RetrievalCache:
    sample_ids: np.ndarray  # (N,)
    neighbor_ids: np.ndarray  # (N, K) pool sample ids
    scores: np.ndarray  # (N, K)

    def save(self, path):
        n, k = self.neighbor_ids.shape
        dt = np.dtype([("sample_id", "<u8"), ("n", "<u4"), ("ids", "<i8", (k,)),
                       ("scores", "<f8", (k,))])
        rec = np.zeros(n, dtype=dt)
        rec["sample_id"] = self.sample_ids
        rec["n"] = k
        rec["ids"] = self.neighbor_ids
        rec["scores"] = self.scores
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, n, k))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "RetrievalCache":
        raw = Path(path).read_bytes()
        magic, version, n, k = _CACHE_HEADER.unpack_from(raw, 0)
        if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
            raise RetrievalError(f"{path}: not a retrieval cache file")
        dt = np.dtype([("sample_id", "<u8"), ("n", "<u4"), ("ids", "<i8", (k,)),
                       ("scores", "<f8", (k,))])
        rec = np.frombuffer(raw, dtype=dt, count=n, offset=_CACHE_HEADER.size)
        return cls(rec["sample_id"].astype(np.int64), rec["ids"].astype(np.int64).reshape(n, k),
                   rec["scores"].astype(np.float64).reshape(n, k))


def build_cache(index: SearchPoolIndex, queries: Dataset, k: int, threads: int = 1) -> RetrievalCache:
    rows, scores = retrieve_rows(index, queries.features, k, threads)
    return RetrievalCache(queries.sample_ids.copy(), index.pool.sample_ids[rows], scores)
