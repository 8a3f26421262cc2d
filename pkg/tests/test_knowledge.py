import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from micro import CARDS, micro_batch, micro_kb, micro_targets, perturb
from roklab import engine as E
from roklab import knowledge as K
from roklab.data import Sample


def stage1_problem(seed, n=6):
    kb = micro_kb(seed)
    perturb(kb.store, seed, scale=0.3)
    q, nb, _, _ = micro_batch(seed, n=n, k=1)
    r = np.random.default_rng(seed + 50).normal(size=(n, kb.d_z))
    return kb, q, nb[:, 0, :], r


class TestEncode:
    def test_shape_and_determinism(self):
        kb = micro_kb(0)
        x = Sample((0, 3, 7), 1)
        z = K.encode(kb, x)
        assert z.shape == (kb.d_z,) == (2 * (len(CARDS) + 1),)
        assert np.array_equal(z, K.encode(kb, x))

    def test_out_of_vocab(self):
        with pytest.raises(K.KnowledgeError):
            K.encode(micro_kb(0), Sample((0, 3, 99), 1))

    def test_default_widths(self):
        kb = micro_kb(0, d=6, d_t=2)
        assert kb.f_width == 3 and kb.g_hidden == 2 * kb.d_z and kb.h_hidden == kb.d_z

    def test_odd_d(self):
        with pytest.raises(K.KnowledgeError):
            K.KnowledgeBase(9, 3, 5, 8)


class TestLosses:
    def test_imitation_zero_at_target(self):
        r = np.arange(6.0).reshape(2, 3)
        assert float(K.imitation_loss(r, r).value) == 0.0

    def test_imitation_width_mismatch(self):
        with pytest.raises(K.KnowledgeError):
            K.imitation_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_cosine_examples(self):
        assert float(K.cosine_d([1.0, 2.0], [1.0, 2.0]).value) == pytest.approx(1.0, abs=1e-15)
        assert float(K.cosine_d([1.0, 0.0], [-2.0, 0.0]).value) == pytest.approx(-1.0, abs=1e-15)
        assert float(K.cosine_d([1.0, 0.0], [0.0, 3.0]).value) == 0.0

    def test_cosine_zero_vector(self):
        with pytest.raises(E.EngineError):
            K.cosine_d([0.0, 0.0], [1.0, 1.0])

    def test_contrastive_minimum(self):
        z = np.array([[1.0, 2.0, -1.0]])
        assert float(K.contrastive_loss(z, z, 3 * z, z).value) == pytest.approx(-1.0, abs=1e-15)

    def test_combined_endpoints(self):
        assert K.combined_loss(2.0, -0.5, 0.0) == 2.0
        assert K.combined_loss(2.0, -0.5, 1.0) == -0.5
        with pytest.raises(K.KnowledgeError):
            K.combined_loss(2.0, -0.5, 1.5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-10, 10), st.floats(-1, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_combined_is_linear_in_alpha(self, li, lc, a, b, c):
        """Three points (alpha, loss) are collinear."""
        ys = [K.combined_loss(li, lc, t) for t in (a, b, c)]
        cross = (b - a) * (ys[2] - ys[0]) - (c - a) * (ys[1] - ys[0])
        assert abs(cross) <= 1e-12 * (1 + abs(li) + abs(lc))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
           st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(1e-3, 1e3))
    def test_cosine_scale_invariant(self, p, z, c):
        p, z = np.array(p), np.array(z)
        if np.linalg.norm(p) < 1e-3 or np.linalg.norm(z) < 1e-3:
            return
        a = float(K.cosine_d(c * p, z).value)
        assert a == pytest.approx(float(K.cosine_d(p, z).value), abs=1e-12)


class TestStopGradient:
    def test_stopped_inputs_get_no_gradient(self):
        rng = np.random.default_rng(0)
        leaves = {n: E.Var(rng.normal(size=(4, 5)), name=n, requires_grad=True)
                  for n in ("p_x", "z_s", "p_s", "z_x")}
        tape = E.backward(K.contrastive_loss(*leaves.values()))
        assert "z_s" not in tape and "z_x" not in tape
        assert np.abs(tape["p_x"]).sum() > 0 and np.abs(tape["p_s"]).sum() > 0

    @pytest.mark.parametrize("alpha", [0.3, 1.0])
    def test_constant_stopped_branches_change_nothing(self, alpha):
        """Replacing the stopped operands by plain constants leaves every
        parameter gradient bit-identical."""
        kb, x, s, r = stage1_problem(1)
        full, _, _ = K.stage1_loss(kb, x, s, r, alpha)
        tape_full = E.backward(full)

        z_x = kb.encode_vars(x)
        z_s = kb.encode_vars(s)
        contra = K.contrastive_loss(kb.h(z_x), z_s.value.copy(), kb.h(z_s), z_x.value.copy())
        manual = K.combined_loss(K.imitation_loss(z_x, r), contra, alpha)
        tape_manual = E.backward(manual)
        assert tape_full.names() == tape_manual.names()
        for name in tape_full.names():
            assert np.array_equal(tape_full[name], tape_manual[name]), name


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_stage1_gradient_check(seed, alpha):
    kb, x, s, r = stage1_problem(seed)

    def loss(store):
        return K.stage1_loss(kb.view(store, ""), x, s, r, alpha)[0]

    rep = E.grad_check(loss, kb.store)
    assert rep.passed, rep


class TestConstruct:
    def test_zero_epochs_is_initialisation(self):
        sp, _, _, tg = micro_targets(0)
        kb, trace = K.construct_knowledge(tg, sp.pool, sp.train, 4, K.ConstructionConfig(epochs=0))
        assert kb.store.equals(K.KnowledgeBase(sp.train.vocab_size, 3, 4, tg.r.shape[1]).store)
        assert [row["epoch"] for row in trace] == [0]

    def test_deterministic(self):
        sp, _, _, tg = micro_targets(1)
        cfg = K.ConstructionConfig(epochs=2, batch_size=8)
        a, ta = K.construct_knowledge(tg, sp.pool, sp.train, 4, cfg)
        b, tb = K.construct_knowledge(tg, sp.pool, sp.train, 4, cfg)
        assert a.store.equals(b.store) and ta == tb

    def test_missing_target_record(self):
        sp, _, _, tg = micro_targets(2)
        short = K.KnowledgeTargets(tg.sample_ids[:-1], tg.r[:-1], tg.pos_ids[:-1],
                                   tg.num_fields, tg.dim)
        with pytest.raises(K.KnowledgeError, match="1 sample ids missing"):
            K.construct_knowledge(short, sp.pool, sp.train, 4)

    def test_bad_alpha(self):
        with pytest.raises(K.KnowledgeError):
            K.ConstructionConfig(alpha=-0.1)

    def test_trace_parts(self):
        sp, _, _, tg = micro_targets(3)
        _, trace = K.construct_knowledge(tg, sp.pool, sp.train, 4,
                                         K.ConstructionConfig(alpha=0.25, epochs=1))
        row = trace[-1]
        assert row["loss"] == pytest.approx(0.75 * row["imitation"] + 0.25 * row["contrastive"],
                                            rel=1e-12)

    def test_imitation_learns_on_default_config(self, default_run):
        kb, trace = default_run.kb(0.0)
        first, last = trace[0]["imitation"], trace[-1]["imitation"]
        assert last <= 0.5 * first
        sp = default_run.split
        assert K.mean_imitation_loss(kb, sp.train, default_run.targets) == pytest.approx(last,
                                                                                        rel=1e-9)


def test_encode_array_matches_tape():
    kb = micro_kb(8)
    perturb(kb.store, 8)
    q, _, _, _ = micro_batch(8, n=5)
    np.testing.assert_allclose(K.encode_array(kb, q), kb.encode_vars(q).value, rtol=0, atol=1e-14)
