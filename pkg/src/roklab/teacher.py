"""Retrieval-based teacher: attentive aggregation of retrieved neighbors'
features and labels into a dense representation, followed by an MLP head."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine as E
from .data import Dataset, Sample, TemporalSplit
from .metrics import auc
from .retrieval import (RetrievalCache, RetrievalResult, SearchPoolIndex, build_cache,
                        select_positive)


class TeacherError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    dim: int = 16  # d_t
    hidden: int = 64
    k: int = 10
    epochs: int = 4
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


class TeacherModel:
    """Parameters: ``emb`` over the feature vocabulary plus two label tokens
    (ids ``vocab`` and ``vocab + 1``), and a two-layer head over
    ``[query field embeddings, r]``."""

    def __init__(self, vocab_size: int, num_fields: int, dim: int = 16, hidden: int = 64,
                 seed: int = 0, store: E.ParamStore | None = None):
        self.vocab_size = vocab_size
        self.num_fields = num_fields
        self.dim = dim
        self.hidden = hidden
        if store is None:
            rng = np.random.default_rng(seed)
            store = E.ParamStore()
            store.add("emb", E.init_embedding(rng, vocab_size + 2, dim), "teacher")
            w1, b1 = E.init_affine(rng, (2 * num_fields + 1) * dim, hidden)
            w2, b2 = E.init_affine(rng, hidden, 1)
            store.add("head.W1", w1, "teacher")
            store.add("head.b1", b1, "teacher")
            store.add("head.W2", w2, "teacher")
            store.add("head.b2", b2, "teacher")
        self.store = store

    @property
    def rep_width(self) -> int:
        return self.dim * (self.num_fields + 1)

    def meta(self) -> dict:
        return {"kind": "teacher", "vocab_size": self.vocab_size, "num_fields": self.num_fields,
                "dim": self.dim, "hidden": self.hidden}

    @classmethod
    def from_store(cls, store: E.ParamStore, meta: dict) -> "TeacherModel":
        return cls(meta["vocab_size"], meta["num_fields"], meta["dim"], meta["hidden"], store=store)


def _check_ids(model: TeacherModel, ids: np.ndarray):
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise TeacherError("feature id outside the teacher vocabulary")


def attention_weights(model: TeacherModel, store: E.ParamStore, query_ids, neighbor_ids) -> E.Var:
    """Softmax over neighbors of <mean query embedding, mean neighbor embedding>."""
    emb = store.var("emb")
    q = E.mean_pool(E.embedding_lookup(emb, query_ids), axis=1)  # (B, d)
    n = E.mean_pool(E.embedding_lookup(emb, neighbor_ids), axis=2)  # (B, K, d)
    return E.softmax(E.dot(n, E.reshape(q, (q.shape[0], 1, q.shape[1]))))


def aggregate_vars(model: TeacherModel, store: E.ParamStore, query_ids, neighbor_ids,
                   neighbor_labels) -> tuple[E.Var, E.Var]:
    """Batched aggregation.  Shapes: query (B, F), neighbors (B, K, F),
    labels (B, K).  Returns ``(r, weights)`` with r of width d*(F+1)."""
    b, k, f = neighbor_ids.shape
    d = model.dim
    emb = store.var("emb")
    weights = attention_weights(model, store, query_ids, neighbor_ids)
    n_emb = E.reshape(E.embedding_lookup(emb, neighbor_ids), (b, k, f * d))
    l_emb = E.embedding_lookup(emb, model.vocab_size + np.asarray(neighbor_labels))  # (B, K, d)
    r = E.weighted_sum(weights, E.concat([n_emb, l_emb], axis=-1))
    return r, weights


def head_logit_vars(model: TeacherModel, store: E.ParamStore, query_ids, r) -> E.Var:
    b = len(query_ids)
    q = E.reshape(E.embedding_lookup(store.var("emb"), query_ids),
                  (b, model.num_fields * model.dim))
    h = E.relu(E.affine(E.concat([q, r]), store.var("head.W1"), store.var("head.b1")))
    return E.affine(h, store.var("head.W2"), store.var("head.b2"))


def head_vars(model: TeacherModel, store: E.ParamStore, query_ids, r) -> E.Var:
    return E.sigmoid(head_logit_vars(model, store, query_ids, r))


def logit_vars(model: TeacherModel, store: E.ParamStore, query_ids, neighbor_ids,
               neighbor_labels) -> E.Var:
    r, _ = aggregate_vars(model, store, query_ids, neighbor_ids, neighbor_labels)
    return head_logit_vars(model, store, query_ids, r)


def forward_vars(model: TeacherModel, store: E.ParamStore, query_ids, neighbor_ids,
                 neighbor_labels) -> E.Var:
    return E.sigmoid(logit_vars(model, store, query_ids, neighbor_ids, neighbor_labels))


def infer(model: TeacherModel, query_ids, neighbor_ids, neighbor_labels) -> np.ndarray:
    """Tape-free twin of :func:`forward_vars` for serving.  Returns (B,)
    probabilities."""
    s = model.store
    emb = s["emb"]
    b, k, f = neighbor_ids.shape
    q = emb[query_ids]  # (B, F, d)
    n = emb[neighbor_ids]  # (B, K, F, d)
    att = (n.mean(axis=2) * q.mean(axis=1)[:, None, :]).sum(axis=-1)
    e = np.exp(att - att.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    vals = np.concatenate([n.reshape(b, k, f * model.dim),
                           emb[model.vocab_size + np.asarray(neighbor_labels)]], axis=-1)
    r = (w[:, :, None] * vals).sum(axis=1)
    h = np.concatenate([q.reshape(b, f * model.dim), r], axis=-1) @ s["head.W1"] + s["head.b1"]
    h = np.where(h > 0, h, 0.0)
    return E.sigmoid_array(h @ s["head.W2"] + s["head.b2"])[:, 0]


def aggregate(model: TeacherModel, query: Sample, neighbors: Sequence[Sample]) -> np.ndarray:
    """Aggregated representation r for one query.  Only the neighbors' labels
    are used; the query label never enters."""
    if len(neighbors) == 0:
        raise TeacherError("aggregate needs at least one neighbor")
    q = np.asarray([query.features])
    _check_ids(model, q)
    n = np.asarray([[s.features for s in neighbors]])
    _check_ids(model, n)
    lab = np.asarray([[s.label for s in neighbors]])
    r, _ = aggregate_vars(model, model.store, q, n, lab)
    return r.value[0]


def teacher_predict(model: TeacherModel, query: Sample, r: np.ndarray) -> float:
    """Click probability from r.  Kept inside the loss's clipping band
    ``[1e-12, 1 - 1e-12]`` so a saturated sigmoid never reports exactly 0 or 1."""
    q = np.asarray([query.features])
    _check_ids(model, q)
    r = np.asarray(r, dtype=np.float64).reshape(1, -1)
    if r.shape[1] != model.rep_width:
        raise TeacherError(f"r has width {r.shape[1]}, expected {model.rep_width}")
    return float(np.clip(head_vars(model, model.store, q, r).value[0, 0], E.BCE_EPS, 1.0 - E.BCE_EPS))


def bce_loss(y_hat, y) -> float:
    """Negative log-likelihood of a {0,1} label under probability ``y_hat``,
    with ``y_hat`` clipped to ``[1e-12, 1 - 1e-12]``."""
    if y not in (0, 1):
        raise TeacherError(f"label must be 0 or 1, got {y}")
    return float(E.bce(np.asarray([float(y_hat)]), [y]).value)


def bce_grad(y_hat, y) -> float:
    """d bce_loss / d y_hat."""
    p = E.as_var(np.asarray([float(y_hat)]))
    p.requires_grad = True
    p.name = "p"
    return float(E.backward(E.bce(p, [y]))["p"][0])


# --------------------------------------------------------------------------
# training

def neighbor_arrays(pool: Dataset, cache: RetrievalCache, rows=None):
    """Neighbor feature ids (B, K, F) and labels (B, K) for cached queries."""
    ids = cache.neighbor_ids if rows is None else cache.neighbor_ids[rows]
    prow = pool.rows_of(ids.reshape(-1)).reshape(ids.shape)
    return pool.features[prow], pool.labels[prow]


def predict_dataset(model: TeacherModel, pool: Dataset, ds: Dataset, cache: RetrievalCache,
                    batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(ds))
    for start in range(0, len(ds), batch_size):
        rows = np.arange(start, min(start + batch_size, len(ds)))
        nf, nl = neighbor_arrays(pool, cache, rows)
        out[rows] = forward_vars(model, model.store, ds.features[rows], nf, nl).value[:, 0]
    return out


@dataclass
class TrainTrace:
    rows: list[dict]

    def column(self, key):
        return [r[key] for r in self.rows]


def pretrain_teacher(split: TemporalSplit, index: SearchPoolIndex, config: TeacherConfig = TeacherConfig(),
                     cache: RetrievalCache | None = None) -> tuple[TeacherModel, TrainTrace]:
    """Minibatch Adam on BCE over the train split with retrieved neighbors."""
    train, pool = split.train, split.pool
    model = TeacherModel(train.vocab_size, train.num_fields, config.dim, config.hidden, config.seed)
    if cache is None:
        cache = build_cache(index, train, config.k)
    if not np.array_equal(cache.sample_ids, train.sample_ids):
        raise TeacherError("retrieval cache does not match the train split")
    rng = np.random.default_rng(config.seed + 1)
    trace = []
    for epoch in range(1, config.epochs + 1):
        losses, sizes = [], []
        for rows in E.minibatches(len(train), config.batch_size, rng):
            nf, nl = neighbor_arrays(pool, cache, rows)
            logits = logit_vars(model, model.store, train.features[rows], nf, nl)
            loss = E.bce_with_logits(logits, train.labels[rows])
            E.adam_step(model.store, E.backward(loss), lr=config.lr)
            losses.append(float(loss.value))
            sizes.append(len(rows))
        if sizes:
            mean = float(np.average(losses, weights=sizes))
            scores = predict_dataset(model, pool, train, cache)
            trace.append({"epoch": epoch, "train_loss": mean,
                          "train_auc": auc(scores, train.labels)})
    return model, TrainTrace(trace)


# --------------------------------------------------------------------------
# knowledge target file
#
# Little-endian.  Header: magic b"ROKT", version u32, count u64, F u32, d_t u32.
# Then ``count`` fixed-width records:
#   sample_id u64, r float64[d_t * (F + 1)], pos_id u64

_KT_MAGIC = b"ROKT"
_KT_VERSION = 1
_KT_HEADER = struct.Struct("<4sIQII")


def _kt_dtype(width: int) -> np.dtype:
    return np.dtype([("sample_id", "<u8"), ("r", "<f8", (width,)), ("pos_id", "<u8")])


@dataclass
class KnowledgeTargets:
    sample_ids: np.ndarray  # (N,)
    r: np.ndarray  # (N, d_t*(F+1))
    pos_ids: np.ndarray  # (N,)
    num_fields: int
    dim: int

    def __len__(self):
        return len(self.sample_ids)

    def to_bytes(self) -> bytes:
        rec = np.zeros(len(self), dtype=_kt_dtype(self.dim * (self.num_fields + 1)))
        rec["sample_id"] = self.sample_ids
        rec["r"] = self.r
        rec["pos_id"] = self.pos_ids
        return _KT_HEADER.pack(_KT_MAGIC, _KT_VERSION, len(self), self.num_fields,
                               self.dim) + rec.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KnowledgeTargets":
        magic, version, n, f, d = _KT_HEADER.unpack_from(raw, 0)
        if magic != _KT_MAGIC:
            raise TeacherError("not a knowledge target file")
        if version != _KT_VERSION:
            raise TeacherError(f"unsupported knowledge target version {version}")
        width = d * (f + 1)
        expected = _KT_HEADER.size + n * _kt_dtype(width).itemsize
        if len(raw) != expected:
            raise TeacherError(f"knowledge target file truncated: {len(raw)} != {expected} bytes")
        rec = np.frombuffer(raw, dtype=_kt_dtype(width), count=n, offset=_KT_HEADER.size)
        return cls(rec["sample_id"].astype(np.int64), rec["r"].reshape(n, width).copy(),
                   rec["pos_id"].astype(np.int64), f, d)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "KnowledgeTargets":
        return cls.from_bytes(Path(path).read_bytes())


def export_knowledge_targets(model: TeacherModel, index: SearchPoolIndex, split: TemporalSplit,
                             k: int = 10, cache: RetrievalCache | None = None,
                             positive: str = "most_related", seed: int = 0,
                             batch_size: int = 1024) -> KnowledgeTargets:
    """r_t and a positive neighbor id for every train sample, in sample_id order."""
    train, pool = split.train, split.pool
    if cache is None:
        cache = build_cache(index, train, k)
    r = np.empty((len(train), model.rep_width))
    for start in range(0, len(train), batch_size):
        rows = np.arange(start, min(start + batch_size, len(train)))
        nf, nl = neighbor_arrays(pool, cache, rows)
        r[rows] = aggregate_vars(model, model.store, train.features[rows], nf, nl)[0].value
    if cache.neighbor_ids.shape[1] == 0:
        raise TeacherError("no neighbors retrieved")
    if positive == "most_related":
        pos = cache.neighbor_ids[:, 0].copy()
    elif positive == "random":
        pos = np.array([select_positive(RetrievalResult(tuple(ids.tolist()), tuple(sc.tolist())),
                                        "random", seed=(seed, int(sid)))
                        for sid, ids, sc in zip(train.sample_ids, cache.neighbor_ids, cache.scores)],
                       dtype=np.int64)
    else:
        raise TeacherError(f"unknown positive-selection strategy {positive!r}")
    return KnowledgeTargets(train.sample_ids.copy(), r, pos, train.num_fields, model.dim)
