import csv

import numpy as np
import pytest

from micro import micro_backbone, micro_split, micro_teacher
from roklab import bench
from roklab.knowledge import encode, encode_dataset
from roklab.retrieval import SearchPoolIndex, build_index


@pytest.fixture(scope="module")
def setup():
    sp = micro_split(0, n=200)
    model, kb = micro_backbone("mlp")
    pools = {50: build_index(sp.pool.take(np.arange(50))), 100: build_index(sp.pool)}
    return sp, model, kb, pools, micro_teacher(0, dim=2)


def test_kb_path_holds_no_pool(setup):
    _, model, _, _, _ = setup
    path = bench.KnowledgePath(model)
    assert not any(isinstance(v, SearchPoolIndex) for v in vars(path).values())


def test_report(setup, tmp_path):
    sp, model, _, pools, teacher = setup
    before = {k: p.lookups for k, p in pools.items()}
    cfg = bench.BenchConfig(warmup=2, samples=10, k=3, threads=2)
    rep = bench.bench_latency(sp.test, pools, teacher, model, cfg)
    assert len(rep.timings) == 2 * 2 * 2
    for t in rep.timings:
        assert t.n == 10 and t.mean_ms > 0
        if t.path == "retrieval_teacher":
            assert t.mean_ms >= t.retrieval_mean_ms
    # each retrieval-path call is one lookup; the knowledge path adds none
    calls = 2 + 10 + 10
    assert {k: p.lookups - before[k] for k, p in pools.items()} == {50: calls, 100: calls}
    rep.write_csv(tmp_path / "lat.csv")
    rows = list(csv.DictReader(open(tmp_path / "lat.csv")))
    assert len(rows) == 8 and rows[0]["cfg_k"] == "3" and rows[0]["batch_size"] == "1"
    assert rep.get("kb_backbone", 100, 2).threads == 2


def test_export_vectors(setup, tmp_path):
    sp, _, kb, _, _ = setup
    bench.export_vectors(kb, sp.test, tmp_path / "a.csv")
    bench.export_vectors(kb, sp.test, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == len(sp.test) + 1
    vecs = np.array([[float(v) for v in row[2:]] for row in rows[1:]])
    # serialization loses no bits relative to the batched computation
    assert np.array_equal(vecs, encode_dataset(kb, sp.test))
    for row, vec, x in zip(rows[1:], vecs, sp.test):
        assert int(row[0]) == x.sample_id and int(row[1]) == x.label
        np.testing.assert_allclose(vec, encode(kb, x), rtol=0, atol=1e-14)
