"""Pipeline stages over an artifact directory.

Layout under ``cfg.artifact_dir`` (every stage directory also gets the
effective ``config.json``)::

    data/dataset.csv, data/dataset.csv.meta.json
    teacher/model.json, teacher/trace.csv, teacher/targets.bin,
    teacher/retrieval_train.bin, teacher/retrieval_test.bin
    kb/model.json, kb/trace.csv
    backbones/<tag>/model.json, backbones/<tag>/trace.csv
    reports/metrics.csv
    reports/latency.csv, reports/latency.png
    reports/sweep_alpha.csv, reports/sweep_alpha.png
    reports/ablate_strategies.csv, reports/ablate_strategies.png
    reports/knowledge_vectors.csv
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import backbone as B
from . import bench
from . import plots
from . import teacher as T
from .config import RunConfig
from .data import DataError, Dataset, TemporalSplit, generate_synthetic, read_dataset, split_temporal, write_dataset
from .engine import EngineError
from .knowledge import KnowledgeBase, KnowledgeError, construct_knowledge
from .metrics import MetricError, MetricReport
from .modelio import ArtifactError, load_store, save_store
from .retrieval import RetrievalCache, RetrievalError, build_cache, build_index


class PipelineError(Exception):
    """Carries a short machine-readable category next to the message."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# library exceptions mapped to CLI error categories
CATEGORIES = (
    (DataError, "data"),
    (ArtifactError, "artifact"),
    (RetrievalError, "retrieval"),
    (KnowledgeError, "knowledge"),
    (T.TeacherError, "teacher"),
    (B.BackboneError, "backbone"),
    (MetricError, "metric"),
    (EngineError, "engine"),
)


class Artifacts:
    """Stable relative paths under one artifact directory."""

    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data" / "dataset.csv")
    teacher = property(lambda self: self.root / "teacher" / "model.json")
    teacher_trace = property(lambda self: self.root / "teacher" / "trace.csv")
    targets = property(lambda self: self.root / "teacher" / "targets.bin")
    cache_train = property(lambda self: self.root / "teacher" / "retrieval_train.bin")
    cache_test = property(lambda self: self.root / "teacher" / "retrieval_test.bin")
    kb = property(lambda self: self.root / "kb" / "model.json")
    kb_trace = property(lambda self: self.root / "kb" / "trace.csv")
    reports = property(lambda self: self.root / "reports")

    def backbone(self, tag: str) -> Path:
        return self.root / "backbones" / tag / "model.json"

    def backbone_trace(self, tag: str) -> Path:
        return self.root / "backbones" / tag / "trace.csv"

    def backbone_tags(self) -> list[str]:
        base = self.root / "backbones"
        if not base.is_dir():
            return []
        return sorted(p.parent.name for p in base.glob("*/model.json"))


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError("missing-artifact", f"{path} not found; run `roklab {producer}` first")
    return path


def write_csv(path, rows: list[dict], fields: list[str] | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _stamp(cfg: RunConfig, path: Path):
    cfg.save(path.parent / "config.json")


# --------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig) -> Dataset:
    art = Artifacts(cfg.artifact_dir)
    if cfg.dataset_path:
        ds = read_dataset(cfg.dataset_path)
    else:
        ds = generate_synthetic(cfg.synthetic_spec())
    write_dataset(ds, art.data)
    _stamp(cfg, art.data)
    cfg.save(art.root / "config.json")
    return ds


def load_split(cfg: RunConfig) -> TemporalSplit:
    ds = read_dataset(require(Artifacts(cfg.artifact_dir).data, "gen-data"))
    return split_temporal(ds, cfg.cut1, cfg.cut2)


def pretrain_teacher(cfg: RunConfig):
    """Train the teacher and write its retrieval caches and knowledge targets."""
    art = Artifacts(cfg.artifact_dir)
    sp = load_split(cfg)
    index = build_index(sp.pool, cfg.k)
    cache_train = build_cache(index, sp.train, cfg.k, threads=cfg.retrieval_threads)
    cache_test = build_cache(index, sp.test, cfg.k, threads=cfg.retrieval_threads)
    model, trace = T.pretrain_teacher(sp, index, cfg.teacher_config(), cache=cache_train)
    targets = T.export_knowledge_targets(model, index, sp, k=cfg.k, cache=cache_train,
                                         positive=cfg.positive, seed=cfg.kb_seed)
    save_store(model.store, art.teacher, model.meta())
    write_csv(art.teacher_trace, trace.rows, ["epoch", "train_loss", "train_auc"])
    cache_train.save(art.cache_train)
    cache_test.save(art.cache_test)
    targets.save(art.targets)
    _stamp(cfg, art.teacher)
    return model, targets


def load_teacher(cfg: RunConfig) -> T.TeacherModel:
    store, meta = load_store(require(Artifacts(cfg.artifact_dir).teacher, "pretrain-teacher"))
    return T.TeacherModel.from_store(store, meta)


def build_kb(cfg: RunConfig, alpha: float | None = None, save: bool = True):
    art = Artifacts(cfg.artifact_dir)
    targets = T.KnowledgeTargets.load(require(art.targets, "pretrain-teacher"))
    sp = load_split(cfg)
    kb, trace = construct_knowledge(targets, sp.pool, sp.train, cfg.d, cfg.construction_config(alpha))
    if save:
        meta = kb.meta()
        meta["alpha"] = cfg.alpha if alpha is None else alpha
        meta["seed"] = cfg.kb_seed
        save_store(kb.store, art.kb, meta)
        write_csv(art.kb_trace, trace, ["epoch", "loss", "imitation", "contrastive"])
        _stamp(cfg, art.kb)
    return kb, trace


def load_kb(cfg: RunConfig) -> KnowledgeBase:
    store, meta = load_store(require(Artifacts(cfg.artifact_dir).kb, "build-kb"))
    return KnowledgeBase.from_store(store, meta)


def train_backbone(cfg: RunConfig, kb: KnowledgeBase | None = None, save: bool = True,
                   split: TemporalSplit | None = None, **override):
    """Train the configured backbone; ``override`` patches BackboneConfig fields."""
    art = Artifacts(cfg.artifact_dir)
    bcfg = cfg.backbone_config(**override)
    sp = split or load_split(cfg)
    if bcfg.integrated and kb is None:
        kb = load_kb(cfg)
    model = B.BackboneModel(bcfg, sp.train.vocab_size, sp.train.num_fields,
                            kb=kb if bcfg.integrated else None)
    model, trace = B.train_backbone(model, sp)
    if save:
        save_store(model.store, art.backbone(bcfg.tag), model.meta())
        write_csv(art.backbone_trace(bcfg.tag), trace,
                  ["epoch", "train_loss", "valid_auc", "valid_logloss"])
        _stamp(cfg, art.backbone(bcfg.tag))
    return model, trace


def load_backbone(cfg: RunConfig, tag: str) -> B.BackboneModel:
    store, meta = load_store(require(Artifacts(cfg.artifact_dir).backbone(tag), "train-backbone"))
    return B.BackboneModel.from_store(store, meta)


def evaluate(cfg: RunConfig, **override) -> list[MetricReport]:
    """Test-split metrics for the configured backbone, every other trained
    backbone, and the teacher when present.  Rel.Impr. is against the
    same-kind baseline when it has been trained."""
    art = Artifacts(cfg.artifact_dir)
    sp = load_split(cfg)
    tag = cfg.backbone_config(**override).tag
    require(art.backbone(tag), "train-backbone")
    reports = []
    if art.teacher.exists() and art.cache_test.exists():
        model = load_teacher(cfg)
        cache = RetrievalCache.load(art.cache_test)
        scores = T.predict_dataset(model, sp.pool, sp.test, cache)
        reports.append(MetricReport.compute("teacher", scores, sp.test.labels))
    scored = {t: B.predict(load_backbone(cfg, t), sp.test) for t in art.backbone_tags()}
    bases = {t.split("-")[0]: MetricReport.compute(t, s, sp.test.labels)
             for t, s in scored.items() if t.endswith("-base")}
    for t, s in scored.items():
        base = bases.get(t.split("-")[0])
        reports.append(MetricReport.compute(t, s, sp.test.labels,
                                            base=base if base is not None and base.model != t else None))
    write_csv(art.reports / "metrics.csv", [r.row() for r in reports],
              ["model", "auc", "logloss", "n", "rel_impr", "base"])
    _stamp(cfg, art.reports / "metrics.csv")
    return reports


def bench_pools(cfg: RunConfig, ds: Dataset) -> dict:
    """Pools of the configured sizes, resampled with replacement from the
    dataset so every size shares one feature distribution."""
    rng = np.random.default_rng(cfg.bench_seed)
    pools = {}
    for size in cfg.bench_pool_sizes:
        rows = np.sort(rng.integers(0, len(ds), size=size))
        pool = Dataset(ds.features[rows], ds.labels[rows], ds.field_cardinalities)
        pools[size] = build_index(pool, cfg.k)
    return pools


def run_bench(cfg: RunConfig, **override) -> bench.LatencyReport:
    art = Artifacts(cfg.artifact_dir)
    sp = load_split(cfg)
    teacher = load_teacher(cfg)
    model = load_backbone(cfg, cfg.backbone_config(**override).tag)
    ds = read_dataset(art.data)
    report = bench.bench_latency(sp.test, bench_pools(cfg, ds), teacher, model, cfg.bench_config())
    report.write_csv(art.reports / "latency.csv")
    plots.plot_latency(report, art.reports / "latency.png")
    _stamp(cfg, art.reports / "latency.csv")
    return report


def export_knowledge(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.artifact_dir)
    kb = load_kb(cfg)
    sp = load_split(cfg)
    out = art.reports / "knowledge_vectors.csv"
    bench.export_vectors(kb, sp.test, out)
    _stamp(cfg, out)
    return out


def _score_row(setting: str, model: B.BackboneModel, sp: TemporalSplit, **extra) -> dict:
    rep = MetricReport.compute(setting, B.predict(model, sp.test), sp.test.labels)
    return {"setting": setting, **extra, "auc": rep.auc, "logloss": rep.logloss}


def sweep_alpha(cfg: RunConfig) -> list[dict]:
    """One knowledge base and one integrated backbone per alpha."""
    art = Artifacts(cfg.artifact_dir)
    sp = load_split(cfg)
    rows = []
    for a in cfg.sweep_alphas:
        kb, _ = build_kb(cfg, alpha=a, save=False)
        model, _ = train_backbone(cfg, kb=kb, save=False, split=sp, feature_wise=True,
                                  instance_wise=True)
        rows.append(_score_row(f"alpha={a:g}", model, sp, alpha=a))
    out = art.reports / "sweep_alpha.csv"
    write_csv(out, rows, ["setting", "alpha", "auc", "logloss"])
    base_tag = cfg.backbone_config(feature_wise=False, instance_wise=False).tag
    base_auc = None
    if art.backbone(base_tag).exists():
        base_auc = MetricReport.compute(base_tag, B.predict(load_backbone(cfg, base_tag), sp.test),
                                        sp.test.labels).auc
    plots.plot_alpha_sweep([r["alpha"] for r in rows], [r["auc"] for r in rows],
                           art.reports / "sweep_alpha.png", baseline_auc=base_auc)
    _stamp(cfg, out)
    return rows


def ablate_strategies(cfg: RunConfig) -> list[dict]:
    """The configured integrated backbone under each update strategy, all
    starting from the saved knowledge base."""
    art = Artifacts(cfg.artifact_dir)
    sp = load_split(cfg)
    kb = load_kb(cfg)
    rows = []
    for strategy in B.STRATEGIES:
        model, _ = train_backbone(cfg, kb=kb, save=False, split=sp, feature_wise=True,
                                  instance_wise=True, update_strategy=strategy)
        rows.append(_score_row(strategy, model, sp))
    out = art.reports / "ablate_strategies.csv"
    write_csv(out, rows, ["setting", "auc", "logloss"])
    plots.plot_strategies([r["setting"] for r in rows], [r["auc"] for r in rows],
                          art.reports / "ablate_strategies.png")
    _stamp(cfg, out)
    return rows


def run_all(cfg: RunConfig, with_bench: bool = False):
    """Every stage in dependency order, the baseline backbone included."""
    gen_data(cfg)
    pretrain_teacher(cfg)
    build_kb(cfg)
    train_backbone(cfg, feature_wise=False, instance_wise=False)
    train_backbone(cfg)
    evaluate(cfg)
    export_knowledge(cfg)
    sweep_alpha(cfg)
    ablate_strategies(cfg)
    if with_bench:
        run_bench(cfg)
