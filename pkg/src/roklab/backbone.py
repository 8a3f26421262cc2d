"""Backbone CTR models (LR, MLP, FM-lite) with optional feature-wise and
instance-wise knowledge integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .data import Dataset, Sample, TemporalSplit
from .knowledge import KnowledgeBase, encode_array
from .metrics import auc, logloss

KINDS = ("lr", "mlp", "fm")
STRATEGIES = ("fix", "upd_g", "upd_fg")
KB_PREFIX = "kb."


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "mlp"
    d: int = 16
    hidden: int = 64
    feature_wise: bool = True
    instance_wise: bool = True
    update_strategy: str = "fix"
    epochs: int = 8
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BackboneError(f"unknown backbone kind {self.kind!r}")
        if self.update_strategy not in STRATEGIES:
            raise BackboneError(f"unknown update strategy {self.update_strategy!r}")
        if self.d % 2:
            raise BackboneError(f"d must be even, got {self.d}")

    @property
    def integrated(self) -> bool:
        return self.feature_wise or self.instance_wise

    @property
    def tag(self) -> str:
        if not self.integrated:
            return f"{self.kind}-base"
        mode = {(True, True): "both", (True, False): "fw", (False, True): "iw"}[
            (self.feature_wise, self.instance_wise)]
        return f"{self.kind}-rok-{mode}-{self.update_strategy}"


def frozen_kb_groups(strategy: str) -> tuple[str, ...]:
    """Knowledge-base groups kept fixed under an update strategy.  The
    projector is never used after construction and is always frozen."""
    return {"fix": ("f", "g", "h"), "upd_g": ("f", "h"), "upd_fg": ("h",)}[strategy]


class BackboneModel:
    """A backbone plus, when integrated, its own copy of the knowledge base
    parameters under the ``kb.`` prefix."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int, num_fields: int,
                 kb: KnowledgeBase | None = None, store: E.ParamStore | None = None):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.num_fields = num_fields
        if cfg.integrated and kb is None:
            raise BackboneError("an integrated backbone needs a knowledge base")
        if kb is not None and kb.d != cfg.d:
            raise BackboneError(f"knowledge base built for d={kb.d}, backbone uses d={cfg.d}")
        if store is None:
            store = self._init_store(kb)
        self.store = store
        self.kb = kb.view(store, KB_PREFIX) if (kb is not None and cfg.integrated) else None
        if self.kb is not None:
            store.unfreeze(*[KB_PREFIX + g for g in ("f", "g", "h")])
            store.freeze(*[KB_PREFIX + g for g in frozen_kb_groups(cfg.update_strategy)])

    @property
    def own_width(self) -> int:
        return self.cfg.d // 2 if self.cfg.feature_wise else self.cfg.d

    @property
    def field_width(self) -> int:
        return self.cfg.d

    def _init_store(self, kb):
        cfg, nf = self.cfg, self.num_fields
        rng = np.random.default_rng(cfg.seed)
        store = E.ParamStore()
        store.add("emb", E.init_embedding(rng, self.vocab_size, self.own_width), "backbone")
        d_z = kb.d_z if (kb is not None and cfg.instance_wise) else 0
        flat = nf * self.field_width

        def layer(name, fan_in, fan_out):
            w, b = E.init_affine(rng, fan_in, fan_out)
            store.add(name + ".W", w, "backbone")
            store.add(name + ".b", b, "backbone")

        if cfg.kind == "lr":
            layer("out", flat + d_z, 1)
        elif cfg.kind == "mlp":
            layer("l1", flat, cfg.hidden)
            layer("l2", cfg.hidden + d_z, cfg.hidden)
            layer("out", cfg.hidden, 1)
        else:
            store.add("linear", np.zeros((self.vocab_size, 1)), "backbone")
            store.add("bias", np.zeros(1), "backbone")
            if d_z:
                store.add("z.W", E.init_affine(rng, d_z, 1)[0], "backbone")
        if kb is not None and cfg.integrated:
            store.absorb(kb.store.extract(kb.prefix), KB_PREFIX)
        return store

    def embedding_param_count(self) -> int:
        """Parameters in the field embedding tables (own + retrieval-oriented)."""
        n = self.store["emb"].size
        if self.cfg.feature_wise:
            n += self.store[KB_PREFIX + "f.emb"].size
        return n

    def meta(self) -> dict:
        out = {"kind": "backbone", "vocab_size": self.vocab_size, "num_fields": self.num_fields,
               "config": self.cfg.__dict__.copy()}
        if self.kb is not None:
            out["kb"] = self.kb.meta()
        return out

    @classmethod
    def from_store(cls, store: E.ParamStore, meta: dict) -> "BackboneModel":
        cfg = BackboneConfig(**meta["config"])
        kb = KnowledgeBase.from_store(store, meta["kb"], prefix=KB_PREFIX) if "kb" in meta else None
        return cls(cfg, meta["vocab_size"], meta["num_fields"], kb=kb, store=store)


def logit_vars(model: BackboneModel, ids) -> E.Var:
    """Click logits (B, 1) for feature-id rows ``ids`` (B, F)."""
    cfg, s = model.cfg, model.store
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise BackboneError("feature id outside the backbone vocabulary")
    b = len(ids)
    if cfg.integrated and model.kb is None:
        raise BackboneError("knowledge base required when an integration mode is on")
    emb = E.embedding_lookup(s.var("emb"), ids)
    if cfg.feature_wise:
        emb = E.concat([emb, model.kb.f(ids)], axis=-1)
    z = model.kb.encode_vars(ids) if cfg.instance_wise else None

    if cfg.kind == "lr":
        phi = E.reshape(emb, (b, model.num_fields * model.field_width))
        x = phi if z is None else E.concat([phi, z])
        logit = E.affine(x, s.var("out.W"), s.var("out.b"))
    elif cfg.kind == "mlp":
        phi = E.relu(E.affine(E.reshape(emb, (b, model.num_fields * model.field_width)),
                              s.var("l1.W"), s.var("l1.b")))
        x = phi if z is None else E.concat([phi, z])
        hid = E.relu(E.affine(x, s.var("l2.W"), s.var("l2.b")))
        logit = E.affine(hid, s.var("out.W"), s.var("out.b"))
    else:
        lin = E.sum_last(E.reshape(E.embedding_lookup(s.var("linear"), ids), (b, model.num_fields)))
        logit = E.add(E.add(lin, s.var("bias")), E.sum_last(E.fm_second_order(emb)))
        if z is not None:
            logit = E.add(logit, E.affine(z, s.var("z.W")))
    return logit


def forward_vars(model: BackboneModel, ids) -> E.Var:
    """Click probabilities (B, 1) for feature-id rows ``ids`` (B, F)."""
    return E.sigmoid(logit_vars(model, ids))


def infer(model: BackboneModel, ids) -> np.ndarray:
    """Tape-free twin of :func:`forward_vars` for serving: plain numpy, no
    graph, no checks beyond what indexing does.  Returns (B,) probabilities."""
    cfg, s = model.cfg, model.store
    ids = np.asarray(ids)
    b = len(ids)
    emb = s["emb"][ids]
    if cfg.feature_wise:
        emb = np.concatenate([emb, s[KB_PREFIX + "f.emb"][ids]], axis=-1)
    z = encode_array(model.kb, ids) if cfg.instance_wise else None
    if cfg.kind == "lr":
        x = emb.reshape(b, -1)
        if z is not None:
            x = np.concatenate([x, z], axis=-1)
        logit = x @ s["out.W"] + s["out.b"]
    elif cfg.kind == "mlp":
        phi = emb.reshape(b, -1) @ s["l1.W"] + s["l1.b"]
        x = np.where(phi > 0, phi, 0.0)
        if z is not None:
            x = np.concatenate([x, z], axis=-1)
        hid = x @ s["l2.W"] + s["l2.b"]
        logit = np.where(hid > 0, hid, 0.0) @ s["out.W"] + s["out.b"]
    else:
        tot = emb.sum(axis=1)
        fm = 0.5 * (tot * tot - (emb * emb).sum(axis=1))
        logit = (s["linear"][ids][..., 0].sum(axis=-1) + s["bias"] + fm.sum(axis=-1))[:, None]
        if z is not None:
            logit = logit + z @ s["z.W"]
    return E.sigmoid_array(logit)[:, 0]


def backbone_forward(model: BackboneModel, kb: KnowledgeBase | None, x: Sample) -> float:
    """Click probability for one sample.

    ``kb`` must be given iff an integration mode is on; the model evaluates
    with its own (possibly fine-tuned) copy of the knowledge base parameters.
    """
    if model.cfg.integrated and kb is None:
        raise BackboneError("knowledge base required when an integration mode is on")
    return float(forward_vars(model, np.asarray([x.features])).value[0, 0])


def predict(model: BackboneModel, ds: Dataset, batch_size: int = 2048) -> np.ndarray:
    out = np.empty(len(ds))
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward_vars(model, ds.features[sl]).value[:, 0]
    return out


def train_backbone(model: BackboneModel, split: TemporalSplit) -> tuple[BackboneModel, list[dict]]:
    """Minibatch Adam on BCE over the train split; frozen knowledge-base
    groups get no optimizer step.  Records per-epoch metrics on the test
    split."""
    cfg = model.cfg
    train, valid = split.train, split.test
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        losses, sizes = [], []
        for rows in E.minibatches(len(train), cfg.batch_size, rng):
            loss = E.bce_with_logits(logit_vars(model, train.features[rows]), train.labels[rows])
            E.adam_step(model.store, E.backward(loss), lr=cfg.lr)
            losses.append(float(loss.value))
            sizes.append(len(rows))
        if not sizes:
            continue
        row = {"epoch": epoch, "train_loss": float(np.average(losses, weights=sizes))}
        if len(valid):
            scores = predict(model, valid)
            row["valid_auc"] = auc(scores, valid.labels)
            row["valid_logloss"] = logloss(scores, valid.labels)
        trace.append(row)
    return model, trace
