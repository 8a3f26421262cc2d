"""Knowledge base distilled from the retrieval teacher.

``f`` is an embedding layer of width d/2, ``g`` an MLP mapping the F
concatenated field embeddings to a vector ``z`` of the teacher
representation's width, and ``h`` a projector used only by the contrastive
term during construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .data import Dataset, Sample
from .teacher import KnowledgeTargets


class KnowledgeError(ValueError):
    pass


@dataclass(frozen=True)
class ConstructionConfig:
    alpha: float = 0.5
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    positive: str = "most_related"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise KnowledgeError(f"alpha must lie in [0, 1], got {self.alpha}")


class KnowledgeBase:
    """Parameters live in ``store`` under ``prefix``; groups are ``f``, ``g``
    and ``h`` (prefixed), so a backbone can carry a copy of the knowledge base
    in its own store and freeze groups individually."""

    def __init__(self, vocab_size: int, num_fields: int, d: int, d_z: int,
                 g_hidden: int | None = None, h_hidden: int | None = None, seed: int = 0,
                 store: E.ParamStore | None = None, prefix: str = ""):
        if d % 2:
            raise KnowledgeError(f"full embedding width d must be even, got {d}")
        self.vocab_size = vocab_size
        self.num_fields = num_fields
        self.d = d
        self.d_z = d_z
        self.g_hidden = g_hidden or 2 * d_z
        self.h_hidden = h_hidden or d_z
        self.prefix = prefix
        if store is None:
            rng = np.random.default_rng(seed)
            store = E.ParamStore()
            store.add(prefix + "f.emb", E.init_embedding(rng, vocab_size, self.f_width), prefix + "f")
            for grp, shapes in (("g", [(num_fields * self.f_width, self.g_hidden),
                                       (self.g_hidden, d_z)]),
                                ("h", [(d_z, self.h_hidden), (self.h_hidden, d_z)])):
                for i, (fan_in, fan_out) in enumerate(shapes, start=1):
                    w, b = E.init_affine(rng, fan_in, fan_out)
                    store.add(f"{prefix}{grp}.W{i}", w, prefix + grp)
                    store.add(f"{prefix}{grp}.b{i}", b, prefix + grp)
        self.store = store

    @property
    def f_width(self) -> int:
        return self.d // 2

    def meta(self) -> dict:
        return {"kind": "knowledge_base", "vocab_size": self.vocab_size,
                "num_fields": self.num_fields, "d": self.d, "d_z": self.d_z,
                "g_hidden": self.g_hidden, "h_hidden": self.h_hidden}

    @classmethod
    def from_store(cls, store: E.ParamStore, meta: dict, prefix: str = "") -> "KnowledgeBase":
        return cls(meta["vocab_size"], meta["num_fields"], meta["d"], meta["d_z"],
                   meta["g_hidden"], meta["h_hidden"], store=store, prefix=prefix)

    def view(self, store: E.ParamStore, prefix: str) -> "KnowledgeBase":
        """The same architecture bound to another store/prefix."""
        return KnowledgeBase(self.vocab_size, self.num_fields, self.d, self.d_z, self.g_hidden,
                             self.h_hidden, store=store, prefix=prefix)

    def p(self, name: str) -> E.Var:
        return self.store.var(self.prefix + name)

    def check_ids(self, ids: np.ndarray):
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise KnowledgeError("feature id outside the knowledge base vocabulary")

    def f(self, ids) -> E.Var:
        """Field embeddings (B, F, d/2)."""
        return E.embedding_lookup(self.p("f.emb"), ids)

    def g(self, field_emb: E.Var) -> E.Var:
        b = field_emb.shape[0]
        x = E.reshape(field_emb, (b, self.num_fields * self.f_width))
        hid = E.relu(E.affine(x, self.p("g.W1"), self.p("g.b1")))
        return E.affine(hid, self.p("g.W2"), self.p("g.b2"))

    def h(self, z: E.Var) -> E.Var:
        hid = E.relu(E.affine(z, self.p("h.W1"), self.p("h.b1")))
        return E.affine(hid, self.p("h.W2"), self.p("h.b2"))

    def encode_vars(self, ids) -> E.Var:
        ids = np.asarray(ids)
        self.check_ids(ids)
        return self.g(self.f(ids))


def encode_array(kb: KnowledgeBase, ids) -> np.ndarray:
    """Tape-free ``g(f(ids))`` for inference; same arithmetic as
    :meth:`KnowledgeBase.encode_vars`."""
    s, p = kb.store, kb.prefix
    ids = np.asarray(ids)
    x = s[p + "f.emb"][ids].reshape(len(ids), kb.num_fields * kb.f_width)
    hid = x @ s[p + "g.W1"] + s[p + "g.b1"]
    hid = np.where(hid > 0, hid, 0.0)
    return hid @ s[p + "g.W2"] + s[p + "g.b2"]


def encode(kb: KnowledgeBase, x: Sample) -> np.ndarray:
    """z = g(f(x)) for one sample."""
    return kb.encode_vars(np.asarray([x.features])).value[0]


def encode_dataset(kb: KnowledgeBase, ds: Dataset, batch_size: int = 2048) -> np.ndarray:
    out = np.empty((len(ds), kb.d_z))
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = kb.encode_vars(ds.features[sl]).value
    return out


# --------------------------------------------------------------------------
# losses

def imitation_loss(z, r) -> E.Var:
    """Mean squared error between knowledge vectors and teacher representations."""
    z, r = E.as_var(z), E.as_var(r)
    if z.shape != r.shape:
        raise KnowledgeError(f"imitation_loss: widths differ, {z.shape} vs {r.shape}")
    return E.mse(z, r)


def cosine_d(p, z) -> E.Var:
    """Cosine similarity of p and z along the last axis.  Gradient flows to
    ``z`` only if the caller has not stopped it."""
    p, z = E.as_var(p), E.as_var(z)
    if p.shape[-1] != z.shape[-1]:
        raise KnowledgeError(f"cosine_d: widths differ, {p.shape} vs {z.shape}")
    return E.dot(E.l2_normalize(p), E.l2_normalize(z))


def contrastive_loss(p_x, z_s, p_s, z_x) -> E.Var:
    """Symmetric negative cosine with both un-projected branches stopped,
    averaged over the batch."""
    d1 = cosine_d(p_x, E.stop_gradient(z_s))
    d2 = cosine_d(p_s, E.stop_gradient(z_x))
    return E.scale(E.mean_all(E.add(d1, d2)), -0.5)


def combined_loss(l_imit, l_contra, alpha: float):
    """Convex blend ``(1 - alpha) * l_imit + alpha * l_contra``."""
    if not 0.0 <= alpha <= 1.0:
        raise KnowledgeError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(l_imit, E.Var) or isinstance(l_contra, E.Var):
        return E.add(E.scale(l_imit, 1.0 - alpha), E.scale(l_contra, alpha))
    return (1.0 - alpha) * l_imit + alpha * l_contra


def stage1_loss(kb: KnowledgeBase, x_ids, s_ids, r, alpha: float) -> tuple[E.Var, E.Var | None, E.Var | None]:
    """Combined construction loss on a batch; also returns its two parts
    (``None`` for a part whose weight is zero)."""
    z_x = kb.encode_vars(x_ids)
    l_imit = imitation_loss(z_x, r) if alpha < 1.0 else None
    l_contra = None
    if alpha > 0.0:
        z_s = kb.encode_vars(s_ids)
        l_contra = contrastive_loss(kb.h(z_x), z_s, kb.h(z_s), z_x)
    if l_imit is None:
        return l_contra, None, l_contra
    if l_contra is None:
        return l_imit, l_imit, None
    return combined_loss(l_imit, l_contra, alpha), l_imit, l_contra


def mean_imitation_loss(kb: KnowledgeBase, ds: Dataset, targets: KnowledgeTargets) -> float:
    z = encode_dataset(kb, ds)
    return float(((z - targets.r) ** 2).mean())


def construct_knowledge(targets: KnowledgeTargets, pool: Dataset, train: Dataset, d: int,
                        cfg: ConstructionConfig = ConstructionConfig()) -> tuple[KnowledgeBase, list[dict]]:
    """Train a knowledge base on the teacher's targets.

    The trace has one row per epoch (epoch 0 is the untrained state) with the
    mean combined, imitation and contrastive losses.
    """
    if len(targets) != len(train) or not np.array_equal(targets.sample_ids, train.sample_ids):
        missing = np.setdiff1d(train.sample_ids, targets.sample_ids)
        raise KnowledgeError(
            f"knowledge targets do not cover the train split ({len(missing)} sample ids missing)")
    d_z = targets.r.shape[1]
    kb = KnowledgeBase(train.vocab_size, train.num_fields, d, d_z, seed=cfg.seed)
    pos_rows = pool.rows_of(targets.pos_ids)
    s_feats = pool.features[pos_rows]
    rng = np.random.default_rng(cfg.seed + 1)

    def evaluate(epoch):
        tot, im, co = [], [], []
        for rows in E.minibatches(len(train), 2048, None):
            loss, li, lc = stage1_loss(kb, train.features[rows], s_feats[rows], targets.r[rows],
                                       cfg.alpha)
            tot.append(float(loss.value) * len(rows))
            im.append(float(li.value) * len(rows) if li is not None else np.nan)
            co.append(float(lc.value) * len(rows) if lc is not None else np.nan)
        n = max(len(train), 1)
        return {"epoch": epoch, "loss": sum(tot) / n, "imitation": sum(im) / n,
                "contrastive": sum(co) / n}

    trace = [evaluate(0)] if len(train) else []
    for epoch in range(1, cfg.epochs + 1):
        for rows in E.minibatches(len(train), cfg.batch_size, rng):
            loss, _, _ = stage1_loss(kb, train.features[rows], s_feats[rows], targets.r[rows],
                                     cfg.alpha)
            E.adam_step(kb.store, E.backward(loss), lr=cfg.lr)
        if len(train):
            trace.append(evaluate(epoch))
    return kb, trace
