import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pairwise_auc
from roklab.metrics import MetricError, MetricReport, auc, logloss, rel_impr


class TestAuc:
    def test_examples(self):
        assert auc([0.1, 0.9], [0, 1]) == 1.0
        assert auc([0.9, 0.1], [0, 1]) == 0.0
        assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_single_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])

    def test_bad_labels(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [0, 2])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(2, 80), st.integers(1, 6))
    def test_matches_pairwise(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, levels, size=n) / levels  # few levels: many ties
        assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=50)
        y[0], y[1] = 0, 1
        s = np.round(rng.normal(size=50), 1)
        assert auc(np.exp(3 * s) + 7, y) == auc(s, y)


class TestLogloss:
    def test_example(self):
        assert logloss([0.5, 0.5], [0, 1]) == pytest.approx(np.log(2), abs=1e-15)

    def test_clipped(self):
        assert np.isfinite(logloss([0.0, 1.0], [1, 0]))


class TestRelImpr:
    @pytest.mark.parametrize("m,b,expect", [(0.9226, 0.8839, 10.08), (0.8093, 0.7647, 16.85)])
    def test_reference_values(self, m, b, expect):
        assert round(rel_impr(m, b), 2) == expect

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.5001, 1.0))
    def test_identity(self, x):
        assert rel_impr(x, x) == 0.0

    def test_base_at_chance(self):
        with pytest.raises(MetricError):
            rel_impr(0.7, 0.5)


def test_report_row():
    base = MetricReport.compute("base", [0.2, 0.6, 0.4, 0.7], [0, 1, 0, 1])
    rep = MetricReport.compute("rok", [0.2, 0.6, 0.4, 0.7], [0, 1, 0, 1], base=base)
    assert rep.rel_impr == 0.0 and rep.row()["base"] == "base" and rep.row()["auc"] == "1.000000"
