"""Per-sample inference latency: retrieval-teacher path vs knowledge-base path,
plus knowledge-vector export."""

from __future__ import annotations

import csv
import gc
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import backbone as B
from . import teacher as T
from .data import Dataset
from .knowledge import KnowledgeBase, encode_dataset
from .retrieval import SearchPoolIndex, _topk_rows


@dataclass(frozen=True)
class BenchConfig:
    warmup: int = 200
    samples: int = 300
    k: int = 10
    threads: int = 1
    repeats: int = 1


@dataclass
class PathTiming:
    path: str
    pool_size: int
    k: int
    batch_size: int
    threads: int
    n: int
    mean_ms: float
    p50_ms: float
    p99_ms: float
    retrieval_mean_ms: float | None = None

    def row(self) -> dict:
        out = asdict(self)
        for key in ("mean_ms", "p50_ms", "p99_ms", "retrieval_mean_ms"):
            if out[key] is not None:
                out[key] = f"{out[key]:.6f}"
            else:
                out[key] = ""
        return out


@dataclass
class LatencyReport:
    timings: list[PathTiming]
    config: BenchConfig

    def get(self, path: str, pool_size: int, threads: int = 1) -> PathTiming:
        for t in self.timings:
            if t.path == path and t.pool_size == pool_size and t.threads == threads:
                return t
        raise KeyError((path, pool_size, threads))

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = list(PathTiming.__dataclass_fields__) + [f"cfg_{k}" for k in asdict(self.config)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for t in self.timings:
                row = t.row()
                row.update({f"cfg_{k}": v for k, v in asdict(self.config).items()})
                w.writerow(row)


# Both paths serve through the tape-free ``infer`` twins of their models, so
# the comparison measures retrieval, not autodiff bookkeeping.


class KnowledgePath:
    """Backbone + knowledge base prediction.  Holds no pool or index, so it
    cannot retrieve."""

    name = "kb_backbone"

    def __init__(self, model: B.BackboneModel):
        self.model = model

    def predict_one(self, features: np.ndarray) -> float:
        return float(B.infer(self.model, features[None, :])[0])


class RetrievalPath:
    """Retrieve top-K from the pool, aggregate and predict with the teacher."""

    name = "retrieval_teacher"

    def __init__(self, teacher: T.TeacherModel, index: SearchPoolIndex, k: int):
        self.teacher = teacher
        self.index = index
        self.k = k

    def retrieve(self, features: np.ndarray) -> np.ndarray:
        return _topk_rows(self.index, features, self.k)[0]

    def predict_rows(self, features: np.ndarray, rows: np.ndarray) -> float:
        pool = self.index.pool
        nf = pool.features[rows][None]
        nl = pool.labels[rows][None]
        return float(T.infer(self.teacher, features[None, :], nf, nl)[0])

    def predict_one(self, features: np.ndarray) -> float:
        return self.predict_rows(features, self.retrieve(features))


def _time_kb(path: KnowledgePath, feats: np.ndarray) -> np.ndarray:
    out = np.empty(len(feats))
    for i, f in enumerate(feats):
        t0 = time.perf_counter()
        path.predict_one(f)
        out[i] = time.perf_counter() - t0
    return out


def _time_retrieval(path: RetrievalPath, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    total = np.empty(len(feats))
    retr = np.empty(len(feats))
    for i, f in enumerate(feats):
        t0 = time.perf_counter()
        rows = path.retrieve(f)
        t1 = time.perf_counter()
        path.predict_rows(f, rows)
        t2 = time.perf_counter()
        retr[i] = t1 - t0
        total[i] = t2 - t0
    return total, retr


def _summary(name, pool_size, cfg, threads, secs, retr=None) -> PathTiming:
    ms = secs * 1e3
    return PathTiming(name, pool_size, cfg.k, 1, threads, len(ms), float(ms.mean()),
                      float(np.percentile(ms, 50)), float(np.percentile(ms, 99)),
                      None if retr is None else float(retr.mean() * 1e3))


def _run_parallel(fn, feats: np.ndarray, threads: int):
    chunks = np.array_split(np.arange(len(feats)), threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda idx: fn(feats[idx]), chunks))
    return parts


def bench_latency(test: Dataset, pools: dict[int, SearchPoolIndex], teacher: T.TeacherModel,
                  model: B.BackboneModel, cfg: BenchConfig = BenchConfig()) -> LatencyReport:
    """Time both prediction paths per sample, for every pool size in ``pools``.

    Every call is single-sample (batch size 1).  The knowledge path is timed
    once per pool size as well, to show it does not depend on the pool.  With
    ``cfg.threads > 1`` an extra parallel measurement is added per path.
    """
    # like timeit: no cyclic-GC pauses inside timed calls, whatever the heap size
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        return _bench(test, pools, teacher, model, cfg)
    finally:
        if gc_was_enabled:
            gc.enable()


def _bench(test, pools, teacher, model, cfg) -> LatencyReport:
    feats = test.features[:cfg.samples]
    warm = test.features[:cfg.warmup]
    kb_path = KnowledgePath(model)
    timings = []
    for pool_size in sorted(pools):
        index = pools[pool_size]
        r_path = RetrievalPath(teacher, index, cfg.k)
        for f in warm:
            kb_path.predict_one(f)
            r_path.predict_one(f)
        kb_secs, tot_secs, retr_secs = [], [], []
        for _ in range(cfg.repeats):
            # interleave repeats so slow drift hits both paths alike
            kb_secs.append(_time_kb(kb_path, feats))
            t, r = _time_retrieval(r_path, feats)
            tot_secs.append(t)
            retr_secs.append(r)
        timings.append(_summary(kb_path.name, pool_size, cfg, 1, np.concatenate(kb_secs)))
        timings.append(_summary(r_path.name, pool_size, cfg, 1, np.concatenate(tot_secs),
                                np.concatenate(retr_secs)))
        if cfg.threads > 1:
            kb_par = np.concatenate(_run_parallel(lambda x: _time_kb(kb_path, x), feats, cfg.threads))
            parts = _run_parallel(lambda x: _time_retrieval(r_path, x), feats, cfg.threads)
            timings.append(_summary(kb_path.name, pool_size, cfg, cfg.threads, kb_par))
            timings.append(_summary(r_path.name, pool_size, cfg, cfg.threads,
                                    np.concatenate([p[0] for p in parts]),
                                    np.concatenate([p[1] for p in parts])))
    return LatencyReport(timings, cfg)


def export_vectors(kb: KnowledgeBase, ds: Dataset, path):
    """CSV rows ``sample_id,label,z_0,...`` with full float precision."""
    z = encode_dataset(kb, ds)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"z_{i}" for i in range(kb.d_z)])
        for sid, label, row in zip(ds.sample_ids.tolist(), ds.labels.tolist(), z.tolist()):
            w.writerow([sid, label] + [repr(v) for v in row])
