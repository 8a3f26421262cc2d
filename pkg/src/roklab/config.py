"""Flat run configuration.

Every knob of every stage lives here.  Values the method itself leaves open
(optimizer, learning rates, epochs, widths, K, split cuts, synthetic data)
are repository choices, marked ``# open`` below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import KINDS, STRATEGIES, BackboneConfig
from .bench import BenchConfig
from .data import SyntheticSpec
from .knowledge import ConstructionConfig
from .teacher import TeacherConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset_path: str = ""  # CSV to load instead of generating
    num_samples: int = 32_000
    field_cardinalities: list = field(default_factory=lambda: [500] * 6)  # open
    num_latent_clusters: int = 4
    cluster_click_probs: list = field(default_factory=lambda: [0.05, 0.35, 0.65, 0.95])  # open
    noise_rate: float = 0.1
    feature_concentration: float = 0.3  # open
    data_seed: int = 7
    cut1: float = 0.625  # open: 20k pool of 32k
    cut2: float = 0.9375  # open: 10k train, 2k test
    # shared widths
    d: int = 8  # open; backbone field width, f takes d/2 of it
    d_t: int = 8  # open; teacher width, knowledge vectors are d_t * (F + 1) wide
    k: int = 10  # open
    retrieval_threads: int = 1
    # teacher
    teacher_hidden: int = 64  # open
    teacher_epochs: int = 4  # open
    teacher_batch_size: int = 256  # open
    teacher_lr: float = 1e-3  # open
    teacher_seed: int = 0
    # knowledge construction
    alpha: float = 0.5  # open
    kb_epochs: int = 20  # open
    kb_batch_size: int = 256  # open
    kb_lr: float = 3e-3  # open
    kb_seed: int = 0
    positive: str = "most_related"
    # backbone
    backbone: str = "mlp"
    backbone_hidden: int = 64  # open
    feature_wise: bool = True
    instance_wise: bool = True
    update_strategy: str = "fix"
    backbone_epochs: int = 8  # open
    backbone_batch_size: int = 256  # open
    backbone_lr: float = 1e-3  # open
    backbone_seed: int = 0
    # reports
    sweep_alphas: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    bench_pool_sizes: list = field(default_factory=lambda: [1_000, 10_000, 100_000])
    bench_samples: int = 300
    bench_warmup: int = 200
    bench_threads: int = 1
    bench_repeats: int = 3
    bench_seed: int = 11
    artifact_dir: str = "artifacts"

    # ------------------------------------------------------------------
    def violations(self) -> list[str]:
        out = []
        if not self.dataset_path:
            try:
                SyntheticSpec(**self._spec_kwargs())
            except ValueError as exc:
                out.extend(str(exc).split("; "))
        if not 0.0 < self.cut1 < self.cut2 < 1.0:
            out.append(f"need 0 < cut1 < cut2 < 1 (got {self.cut1}, {self.cut2})")
        if self.d <= 0 or self.d % 2:
            out.append(f"d must be a positive even integer (got {self.d})")
        if self.d_t <= 0:
            out.append(f"d_t must be positive (got {self.d_t})")
        if self.k <= 0:
            out.append(f"k must be positive (got {self.k})")
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha must lie in [0, 1] (got {self.alpha})")
        if any(not 0.0 <= a <= 1.0 for a in self.sweep_alphas):
            out.append("sweep_alphas must lie in [0, 1]")
        if self.positive not in ("most_related", "random"):
            out.append(f"positive must be most_related or random (got {self.positive!r})")
        if self.backbone not in KINDS:
            out.append(f"backbone must be one of {KINDS} (got {self.backbone!r})")
        if self.update_strategy not in STRATEGIES:
            out.append(f"update_strategy must be one of {STRATEGIES} (got {self.update_strategy!r})")
        for name in ("teacher_epochs", "kb_epochs", "backbone_epochs"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        for name in ("teacher_batch_size", "kb_batch_size", "backbone_batch_size", "teacher_hidden",
                     "backbone_hidden", "bench_samples", "bench_threads", "bench_repeats",
                     "retrieval_threads"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        for name in ("teacher_lr", "kb_lr", "backbone_lr"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        if any(p <= 0 for p in self.bench_pool_sizes):
            out.append("bench_pool_sizes must be positive")
        return out

    def validate(self) -> "RunConfig":
        errors = self.violations()
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))
        return self

    # ------------------------------------------------------------------
    def _spec_kwargs(self) -> dict:
        return dict(num_samples=self.num_samples,
                    field_cardinalities=tuple(self.field_cardinalities),
                    num_latent_clusters=self.num_latent_clusters,
                    cluster_click_probs=tuple(self.cluster_click_probs),
                    noise_rate=self.noise_rate, seed=self.data_seed,
                    feature_concentration=self.feature_concentration)

    def synthetic_spec(self, **override) -> SyntheticSpec:
        return SyntheticSpec(**{**self._spec_kwargs(), **override})

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(dim=self.d_t, hidden=self.teacher_hidden, k=self.k,
                             epochs=self.teacher_epochs, batch_size=self.teacher_batch_size,
                             lr=self.teacher_lr, seed=self.teacher_seed)

    def construction_config(self, alpha: float | None = None) -> ConstructionConfig:
        return ConstructionConfig(alpha=self.alpha if alpha is None else alpha,
                                  epochs=self.kb_epochs, batch_size=self.kb_batch_size,
                                  lr=self.kb_lr, seed=self.kb_seed, positive=self.positive)

    def backbone_config(self, **override) -> BackboneConfig:
        kw = dict(kind=self.backbone, d=self.d, hidden=self.backbone_hidden,
                  feature_wise=self.feature_wise, instance_wise=self.instance_wise,
                  update_strategy=self.update_strategy, epochs=self.backbone_epochs,
                  batch_size=self.backbone_batch_size, lr=self.backbone_lr,
                  seed=self.backbone_seed)
        kw.update(override)
        return BackboneConfig(**kw)

    def bench_config(self) -> BenchConfig:
        return BenchConfig(warmup=self.bench_warmup, samples=self.bench_samples, k=self.k,
                           threads=self.bench_threads, repeats=self.bench_repeats)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("invalid config: unknown keys " + ", ".join(unknown))
        return cls(**data)

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "RunConfig":
        data = {}
        if path:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must be a flat JSON object")
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            try:
                data[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                data[key.strip()] = raw
        return cls.from_dict(data).validate()
