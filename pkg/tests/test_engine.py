import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roklab import engine as E
from roklab.modelio import dumps_store, loads_store


def central_diff(f, x, h=1e-5):
    """Independent finite-difference Jacobian-vector oracle on plain arrays."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def analytic(op, x, upstream):
    v = E.Var(np.array(x, dtype=np.float64), name="x", requires_grad=True)
    out = op(v)
    loss = E.sum_all(E.mul(out, upstream))
    return E.backward(loss)["x"]


def check_unary(op, x, seed=0):
    rng = np.random.default_rng(seed)
    up = rng.normal(size=op(E.as_var(x)).shape)
    num = central_diff(lambda a: float((op(E.as_var(a)).value * up).sum()), x)
    ana = analytic(op, x, up)
    assert E.rel_error(ana, num).max() <= 1e-4


class TestPrimitiveExamples:
    def test_relu_backward_subgradient(self):
        g = analytic(E.relu, [-1.0, 2.0], np.ones(2))
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_relu_derivative_at_zero_is_zero(self):
        assert analytic(E.relu, [0.0], np.ones(1))[0] == 0.0

    def test_l2_normalize(self):
        np.testing.assert_allclose(E.l2_normalize([3.0, 4.0]).value, [0.6, 0.8], atol=1e-15)

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(E.softmax([0.0, 0.0]).value, [0.5, 0.5])

    def test_shape_mismatch_names_primitive(self):
        w = E.Var(np.zeros((3, 2)), name="w", requires_grad=True)
        with pytest.raises(E.EngineError, match="affine.*\\(4,\\)"):
            E.affine(np.zeros(4), w)
        with pytest.raises(E.EngineError, match="dot"):
            E.dot(np.zeros(3), np.zeros(4))

    def test_non_finite_rejected(self):
        with pytest.raises(E.EngineError, match="relu"):
            E.relu([np.nan])
        with pytest.raises(E.EngineError, match="sigmoid"):
            E.sigmoid([np.inf])

    def test_zero_norm_rejected(self):
        with pytest.raises(E.EngineError):
            E.l2_normalize([0.0, 0.0])


class TestPrimitiveGradients:
    rng = np.random.default_rng(1)

    @pytest.mark.parametrize("op", [E.relu, E.sigmoid, E.softmax, E.l2_normalize,
                                    lambda v: E.mean_pool(v, axis=1),
                                    lambda v: E.reshape(v, (-1,)),
                                    E.fm_second_order, E.sum_last])
    def test_unary(self, op):
        x = self.rng.normal(size=(2, 3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # away from the ReLU kink
        check_unary(op, x)

    def test_affine(self):
        x, w, b = (self.rng.normal(size=s) for s in [(5, 3), (3, 4), (4,)])
        up = self.rng.normal(size=(5, 4))
        for name, arr in [("x", x), ("w", w), ("b", b)]:
            vals = {"x": x, "w": w, "b": b}

            def f(a, name=name):
                v = dict(vals, **{name: a})
                return float(((v["x"] @ v["w"] + v["b"]) * up).sum())

            xs = {k: E.Var(v.copy(), name=k, requires_grad=True) for k, v in vals.items()}
            tape = E.backward(E.sum_all(E.mul(E.affine(xs["x"], xs["w"], xs["b"]), up)))
            assert E.rel_error(tape[name], central_diff(f, arr)).max() <= 1e-4

    def test_embedding_lookup_accumulates_repeats(self):
        table = E.Var(self.rng.normal(size=(5, 3)), name="t", requires_grad=True)
        ids = np.array([[1, 1], [4, 0]])
        up = self.rng.normal(size=(2, 2, 3))
        g = E.backward(E.sum_all(E.mul(E.embedding_lookup(table, ids), up)))["t"]
        expect = np.zeros((5, 3))
        for (i, j), v in np.ndenumerate(ids):
            expect[v] += up[i, j]
        np.testing.assert_allclose(g, expect, atol=1e-15)
        assert not g[2].any() and not g[3].any()

    @pytest.mark.parametrize("op,shapes", [
        (E.dot, [(4, 3, 5), (4, 1, 5)]),
        (E.weighted_sum, [(4, 3), (4, 3, 5)]),
        (E.mse, [(4, 5), (4, 5)]),
        (E.mul, [(4, 5), (5,)]),
        (E.add, [(4, 5), (1, 5)]),
        (E.sub, [(4, 5), (4, 5)]),
        (lambda a, b: E.concat([a, b]), [(4, 2), (4, 3)]),
    ])
    def test_binary(self, op, shapes):
        a, b = (self.rng.normal(size=s) for s in shapes)
        up = self.rng.normal(size=op(E.as_var(a), E.as_var(b)).shape)
        for which in (0, 1):
            def f(x, which=which):
                args = [a, b]
                args[which] = x
                return float((op(E.as_var(args[0]), E.as_var(args[1])).value * up).sum())

            va = E.Var(a.copy(), name="a", requires_grad=True)
            vb = E.Var(b.copy(), name="b", requires_grad=True)
            tape = E.backward(E.sum_all(E.mul(op(va, vb), up)))
            got = tape["ab"[which]]
            assert E.rel_error(got, central_diff(f, [a, b][which])).max() <= 1e-4

    def test_bce(self):
        p = self.rng.uniform(0.05, 0.95, size=7)
        y = (self.rng.random(7) < 0.5).astype(float)
        num = central_diff(lambda q: float(E.bce(q, y).value), p)
        ana = analytic(lambda v: E.bce(v, y), p, 1.0)
        assert E.rel_error(ana, num).max() <= 1e-4

    def test_bce_with_logits(self):
        z = self.rng.normal(scale=4.0, size=7)
        y = (self.rng.random(7) < 0.5).astype(float)
        num = central_diff(lambda q: float(E.bce_with_logits(q, y).value), z)
        ana = analytic(lambda v: E.bce_with_logits(v, y), z, 1.0)
        assert E.rel_error(ana, num).max() <= 1e-4


class TestBceWithLogits:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-15, 15), min_size=1, max_size=8), st.integers(0, 255))
    def test_matches_probability_form(self, z, bits):
        z = np.array(z)
        y = np.array([(bits >> i) & 1 for i in range(len(z))], dtype=float)
        expect = float(E.bce(E.sigmoid_array(z), y).value)
        assert float(E.bce_with_logits(z, y).value) == pytest.approx(expect, rel=1e-9, abs=1e-12)

    def test_saturated_logits_stay_exact(self):
        """At z = 40 the probability form clips; the logit form does not."""
        got = float(E.bce_with_logits([40.0], [0]).value)
        assert got == pytest.approx(40.0 + np.log1p(np.exp(-40.0)), rel=1e-15)

    def test_bad_label(self):
        with pytest.raises(E.EngineError):
            E.bce_with_logits([0.0], [0.5])


def test_fm_second_order_matches_pairwise_sum():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(6, 5, 4))
    brute = np.array([sum(e[b, i] @ e[b, j] for i in range(5) for j in range(i + 1, 5))
                      for b in range(6)])
    np.testing.assert_allclose(E.fm_second_order(e).value.sum(axis=1), brute, rtol=0, atol=1e-10)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    store = E.ParamStore()
    store.add("w", rng.normal(size=(4, 3)), "g")

    def run():
        x = np.arange(8.0).reshape(2, 4) / 10
        return E.backward(E.mean_all(E.sigmoid(E.affine(x, store.var("w")))))["w"]

    assert np.array_equal(run(), run())


class TestStopGradient:
    def test_stopped_branch_contributes_nothing(self):
        store = E.ParamStore()
        store.add("a", [1.0, 2.0], "live")
        store.add("b", [0.5, -1.0], "dead")
        out = E.dot(store.var("a"), E.stop_gradient(store.var("b")))
        tape = E.backward(out)
        assert "b" not in tape
        np.testing.assert_array_equal(tape["a"], [0.5, -1.0])

    def test_grad_check_respects_stop_gradient(self):
        # loss = a . sg(a): true derivative 2a, live-branch derivative a
        store = E.ParamStore()
        store.add("a", [1.0, -3.0], "p")

        def loss(s):
            return E.dot(s.var("a"), E.stop_gradient(s.var("a")))

        full = E.numeric_gradient(loss, store, "a", respect_stop=False)
        live = E.numeric_gradient(loss, store, "a", respect_stop=True)
        np.testing.assert_allclose(full, [2.0, -6.0], rtol=1e-8)
        np.testing.assert_allclose(live, [1.0, -3.0], rtol=1e-8)
        np.testing.assert_allclose(full - live, store["a"], rtol=1e-8)  # the stopped contribution
        assert E.grad_check(loss, store).passed


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        store = E.ParamStore()
        store.add("w", [1.0, -2.0], "g")
        E.adam_step(store, E.GradTape({"w": np.zeros(2)}), lr=0.1)
        np.testing.assert_array_equal(store["w"], [1.0, -2.0])

    def test_frozen_group_untouched(self):
        store = E.ParamStore()
        store.add("w", [1.0], "g")
        store.freeze("g")
        before = store["w"].copy()
        E.adam_step(store, E.GradTape({"w": np.array([5.0])}), lr=0.1)
        assert np.array_equal(store["w"], before)

    def test_first_step_closed_form(self):
        # by hand: m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; w = -0.1 * 1 / (1 + eps)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        m = (1 - b1) * 1.0
        v = (1 - b2) * 1.0
        expect = 0.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        store = E.ParamStore()
        store.add("w", [0.0], "g")
        E.adam_step(store, E.GradTape({"w": np.array([1.0])}), lr=lr)
        assert store["w"][0] == pytest.approx(expect, abs=1e-15)
        assert store["w"][0] == pytest.approx(-0.1, rel=1e-7)

    def test_moment_shapes(self):
        store = E.ParamStore()
        store.add("w", np.ones((3, 2)), "g")
        E.adam_step(store, E.GradTape({"w": np.ones((3, 2))}))
        assert store.adam_m["w"].shape == store.adam_v["w"].shape == (3, 2)
        assert store.adam_t["w"] == 1

    def test_shape_mismatch(self):
        store = E.ParamStore()
        store.add("w", np.ones(3), "g")
        with pytest.raises(E.EngineError):
            E.adam_step(store, E.GradTape({"w": np.ones(2)}))


class TestGradCheck:
    def test_quadratic(self):
        store = E.ParamStore()
        store.add("w", [0.3, -1.2, 2.5], "g")

        def loss(s):
            w = s.var("w")
            return E.scale(E.dot(w, w), 0.5)

        tape = E.backward(loss(store))
        np.testing.assert_allclose(tape["w"], store["w"], rtol=1e-15)
        rep = E.grad_check(loss, store)
        assert rep.passed and rep.max_rel_error < 1e-8

    def test_nondeterministic_loss_detected(self):
        store = E.ParamStore()
        store.add("w", [1.0], "g")
        rng = np.random.default_rng(0)
        with pytest.raises(E.EngineError, match="deterministic"):
            E.grad_check(lambda s: E.sum_all(E.mul(s.var("w"), rng.normal(size=1))), store)

    def test_skips_frozen(self):
        store = E.ParamStore()
        store.add("w", [1.0], "a")
        store.add("v", [2.0], "b")
        store.freeze("b")
        rep = E.grad_check(lambda s: E.sum_all(E.mul(s.var("w"), s.var("v"))), store)
        assert set(rep.per_param) == {"w"}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.1, 10))
def test_l2_normalize_scale_invariant(xs, c):
    x = np.array(xs)
    if np.linalg.norm(x) < 1e-3:
        return
    np.testing.assert_allclose(E.l2_normalize(x * c).value, E.l2_normalize(x).value, atol=1e-12)


def test_model_file_round_trip():
    rng = np.random.default_rng(0)
    store = E.ParamStore()
    store.add("a", rng.normal(size=(3, 2)), "g1")
    store.add("b", rng.normal(size=4), "g2")
    store.freeze("g2")
    text = dumps_store(store, {"seed": 1})
    back, meta = loads_store(text)
    assert back.equals(store) and back.frozen_groups == {"g2"} and meta == {"seed": 1}
    assert dumps_store(back, {"seed": 1}) == text
