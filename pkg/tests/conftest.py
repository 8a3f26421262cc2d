import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

sys.path.insert(0, str(Path(__file__).parent))

import pytest  # noqa: E402

from roklab.config import RunConfig  # noqa: E402


class DefaultRun:
    """Lazily computed stages of the default configuration, shared by tests."""

    def __init__(self):
        self.cfg = RunConfig()
        self._cache = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def split(self):
        from roklab.data import generate_synthetic, split_temporal
        return self._get("split", lambda: split_temporal(
            generate_synthetic(self.cfg.synthetic_spec()), self.cfg.cut1, self.cfg.cut2))

    @property
    def index(self):
        from roklab.retrieval import build_index
        return self._get("index", lambda: build_index(self.split.pool, self.cfg.k))

    @property
    def cache_train(self):
        from roklab.retrieval import build_cache
        return self._get("cache_train", lambda: build_cache(self.index, self.split.train, self.cfg.k))

    @property
    def cache_test(self):
        from roklab.retrieval import build_cache
        return self._get("cache_test", lambda: build_cache(self.index, self.split.test, self.cfg.k))

    @property
    def teacher(self):
        from roklab.teacher import pretrain_teacher
        return self._get("teacher", lambda: pretrain_teacher(
            self.split, self.index, self.cfg.teacher_config(), cache=self.cache_train))

    @property
    def targets(self):
        from roklab.teacher import export_knowledge_targets
        return self._get("targets", lambda: export_knowledge_targets(
            self.teacher[0], self.index, self.split, k=self.cfg.k, cache=self.cache_train,
            positive=self.cfg.positive, seed=self.cfg.kb_seed))

    def kb(self, alpha):
        from roklab.knowledge import construct_knowledge
        return self._get(("kb", alpha), lambda: construct_knowledge(
            self.targets, self.split.pool, self.split.train, self.cfg.d,
            self.cfg.construction_config(alpha)))

    def backbone(self, alpha=None, **override):
        from roklab.backbone import BackboneModel, train_backbone
        bcfg = self.cfg.backbone_config(**override)
        key = ("backbone", alpha if bcfg.integrated else None, bcfg)

        def make():
            kb = self.kb(self.cfg.alpha if alpha is None else alpha)[0] if bcfg.integrated else None
            sp = self.split
            return train_backbone(BackboneModel(bcfg, sp.train.vocab_size, sp.train.num_fields,
                                                kb=kb), sp)
        return self._get(key, make)


@pytest.fixture(scope="session")
def default_run():
    return DefaultRun()


# acceptance criteria report: one line per criterion in the terminal summary
_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(number, name, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
