"""Datasets of discrete-feature CTR samples, synthetic generation, temporal
splits and CSV I/O.

Feature ids live in one global vocabulary: field ``j`` owns the contiguous
range ``[offset_j, offset_j + cardinality_j)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: tuple[int, ...]
    label: int
    sample_id: int = 0

    @property
    def num_fields(self) -> int:
        return len(self.features)


def field_offsets(cardinalities: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(cardinalities)[:-1]]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable, temporally ordered collection of samples.

    Arrays: ``features`` (N, F) int64, ``labels`` (N,) int64, ``sample_ids``
    (N,) int64.  Generated and file-loaded datasets have ids ``0..N-1``;
    slices of a split keep the ids of their source.
    """

    features: np.ndarray
    labels: np.ndarray
    field_cardinalities: tuple[int, ...]
    sample_ids: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        cards = tuple(int(c) for c in self.field_cardinalities)
        if not cards or min(cards) <= 0:
            raise DataError(f"field cardinalities must be positive and non-empty, got {cards}")
        feats = np.asarray(self.features, dtype=np.int64).reshape(-1, len(cards))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(feats):
            raise DataError(f"{len(feats)} feature rows but {len(labels)} labels")
        ids = (np.arange(len(feats), dtype=np.int64) if self.sample_ids is None
               else np.asarray(self.sample_ids, dtype=np.int64).reshape(-1))
        if len(ids) != len(feats):
            raise DataError("sample_ids length does not match the number of samples")
        if len(ids) > 1 and np.any(np.diff(ids) <= 0):
            raise DataError("sample_ids must be strictly increasing (temporal order)")
        if not np.all((labels == 0) | (labels == 1)):
            raise DataError("labels must be 0 or 1")
        if len(feats):
            lo = field_offsets(cards)
            hi = lo + np.asarray(cards)
            if np.any(feats < lo) or np.any(feats >= hi):
                bad = int(np.argwhere((feats < lo) | (feats >= hi))[0, 0])
                raise DataError(f"sample {int(ids[bad])}: feature id outside its field range")
        for arr in (feats, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "field_cardinalities", cards)

    @property
    def num_fields(self) -> int:
        return len(self.field_cardinalities)

    @property
    def vocab_size(self) -> int:
        return int(sum(self.field_cardinalities))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(tuple(int(v) for v in self.features[i]), int(self.labels[i]),
                      int(self.sample_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.field_cardinalities,
                       self.sample_ids[rows])

    def rows_of(self, sample_ids) -> np.ndarray:
        """Row positions of the given sample ids; raises on unknown ids."""
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        pos = np.searchsorted(self.sample_ids, sample_ids)
        pos_c = np.minimum(pos, max(len(self) - 1, 0))
        if len(self) == 0 or np.any(self.sample_ids[pos_c] != sample_ids):
            raise DataError("unknown sample id")
        return pos

    def equals(self, other: "Dataset") -> bool:
        return (self.field_cardinalities == other.field_cardinalities
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.sample_ids, other.sample_ids))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the clustered synthetic CTR generator.

    Each latent cluster owns a per-field categorical distribution over that
    field's ids, drawn from a symmetric Dirichlet with concentration
    ``feature_concentration`` (smaller is peakier), and a click probability.
    """

    num_samples: int = 32_000
    field_cardinalities: tuple[int, ...] = (40, 40, 40, 40, 40, 40)
    num_latent_clusters: int = 4
    cluster_click_probs: tuple[float, ...] = (0.05, 0.35, 0.65, 0.95)
    noise_rate: float = 0.1
    seed: int = 7
    feature_concentration: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "field_cardinalities",
                           tuple(int(c) for c in self.field_cardinalities))
        object.__setattr__(self, "cluster_click_probs",
                           tuple(float(p) for p in self.cluster_click_probs))
        errors = self.violations()
        if errors:
            raise DataError("; ".join(errors))

    @property
    def num_fields(self) -> int:
        return len(self.field_cardinalities)

    def violations(self) -> list[str]:
        out = []
        if self.num_samples < 0:
            out.append("num_samples must be >= 0")
        if not self.field_cardinalities:
            out.append("at least one field is required")
        elif min(self.field_cardinalities) <= 0:
            out.append("field cardinalities must be positive")
        if self.num_latent_clusters <= 0:
            out.append("num_latent_clusters must be positive")
        probs = self.cluster_click_probs
        if len(probs) != self.num_latent_clusters:
            out.append("cluster_click_probs needs one entry per cluster")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            out.append("cluster_click_probs must lie in [0, 1]")
        if len(probs) >= 2 and max(probs) - min(probs) < 0.3:
            out.append("cluster_click_probs must spread by at least 0.3")
        if not 0.0 <= self.noise_rate <= 1.0:
            out.append("noise_rate must lie in [0, 1]")
        if self.feature_concentration <= 0:
            out.append("feature_concentration must be positive")
        return out


def generate_synthetic_with_clusters(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Like :func:`generate_synthetic` but also returns the latent cluster of
    every sample."""
    rng = np.random.default_rng(spec.seed)
    n, cards = spec.num_samples, spec.field_cardinalities
    k = spec.num_latent_clusters
    dists = [rng.dirichlet(np.full(c, spec.feature_concentration), size=k) for c in cards]
    clusters = rng.integers(0, k, size=n)
    offsets = field_offsets(cards)
    feats = np.empty((n, len(cards)), dtype=np.int64)
    for j, (c, dist) in enumerate(zip(cards, dists)):
        # inverse-CDF sampling from the row of each sample's cluster
        cdf = np.cumsum(dist, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(n)
        vals = _vector_inverse_cdf(cdf, clusters, u)
        feats[:, j] = offsets[j] + np.minimum(vals, c - 1)
    probs = np.asarray(spec.cluster_click_probs)[clusters]
    labels = (rng.random(n) < probs).astype(np.int64)
    flips = rng.random(n) < spec.noise_rate
    labels = np.where(flips, 1 - labels, labels)
    return Dataset(feats, labels, cards), clusters


def _vector_inverse_cdf(cdf: np.ndarray, clusters: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.empty(len(u), dtype=np.int64)
    for cl in range(cdf.shape[0]):
        mask = clusters == cl
        out[mask] = np.searchsorted(cdf[cl], u[mask], side="right")
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset with planted cluster structure shared by features and labels.

    Each sample gets a latent cluster; each field value is drawn from that
    cluster's categorical distribution; the label is Bernoulli with the
    cluster's click probability, then flipped with probability ``noise_rate``.
    The cluster assignment is discarded.
    """
    return generate_synthetic_with_clusters(spec)[0]


@dataclass(frozen=True)
class TemporalSplit:
    pool: Dataset
    train: Dataset
    test: Dataset
    boundaries: tuple[float, float] = field(default=(0.6, 0.9))


def split_temporal(ds: Dataset, cut1: float = 0.6, cut2: float = 0.9) -> TemporalSplit:
    """Oldest ``floor(cut1*N)`` samples form the pool, the next slice up to
    ``floor(cut2*N)`` is train, the remainder is test."""
    if not 0.0 < cut1 < cut2 < 1.0:
        raise DataError(f"need 0 < cut1 < cut2 < 1, got {cut1}, {cut2}")
    n = len(ds)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    a, b = math.floor(cut1 * n), math.floor(cut2 * n)
    return TemporalSplit(ds.take(np.arange(0, a)), ds.take(np.arange(a, b)),
                         ds.take(np.arange(b, n)), (cut1, cut2))


# --------------------------------------------------------------------------
# CSV files

def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def parse_row(text: str, num_fields: int, lineno: int = 1) -> Sample:
    """Parse one ``f_1,...,f_F,label`` row (no range checks)."""
    parts = text.strip().split(",")
    if len(parts) != num_fields + 1:
        raise DataError(f"line {lineno}: expected {num_fields + 1} values, got {len(parts)}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise DataError(f"line {lineno}: non-integer value in {text.strip()!r}") from None
    if any(v < 0 for v in values[:-1]):
        raise DataError(f"line {lineno}: negative feature id")
    if values[-1] not in (0, 1):
        raise DataError(f"line {lineno}: label must be 0 or 1, got {values[-1]}")
    return Sample(tuple(values[:-1]), values[-1], lineno - 1)


def write_dataset(ds: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row, label in zip(ds.features.tolist(), ds.labels.tolist()):
            writer.writerow(row + [label])
    meta = {"num_fields": ds.num_fields, "field_cardinalities": list(ds.field_cardinalities),
            "vocab_size": ds.vocab_size}
    meta_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    path = Path(path)
    mp = meta_path(path)
    if not mp.exists():
        raise DataError(f"{path}: missing metadata sidecar {mp.name}")
    meta = json.loads(mp.read_text(encoding="utf-8"))
    cards = tuple(int(c) for c in meta["field_cardinalities"])
    nf = int(meta["num_fields"])
    if nf != len(cards) or int(meta["vocab_size"]) != sum(cards):
        raise DataError(f"{mp}: inconsistent metadata")
    lo = field_offsets(cards)
    hi = lo + np.asarray(cards)
    feats, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = parse_row(line, nf, lineno)
            f = np.asarray(s.features)
            if np.any(f < lo) or np.any(f >= hi):
                raise DataError(f"{path}: line {lineno}: feature id outside its field range")
            feats.append(s.features)
            labels.append(s.label)
    return Dataset(np.asarray(feats, dtype=np.int64).reshape(-1, nf), np.asarray(labels), cards)
