"""Ranking and likelihood metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

EPS = 1e-12


class MetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank sum; tied scores get average ranks,
    i.e. half credit per tied positive/negative pair."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(scores) != len(labels):
        raise MetricError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy with probabilities clipped to [eps, 1-eps]."""
    p = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(p) != len(y):
        raise MetricError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def rel_impr(measured_auc: float, base_auc: float) -> float:
    """Relative AUC improvement over a base model, in percent, measured from
    the 0.5 random-guess floor."""
    if base_auc <= 0.5:
        raise MetricError(f"base AUC must exceed 0.5, got {base_auc}")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


@dataclass(frozen=True)
class MetricReport:
    model: str
    auc: float
    logloss: float
    n: int
    rel_impr: float | None = None
    base: str | None = None

    @classmethod
    def compute(cls, model: str, scores, labels, base: "MetricReport | None" = None) -> "MetricReport":
        a = auc(scores, labels)
        ri = rel_impr(a, base.auc) if base is not None and base.auc > 0.5 else None
        return cls(model, a, logloss(scores, labels), len(labels), ri,
                   base.model if base is not None else None)

    def row(self) -> dict:
        return {"model": self.model, "auc": f"{self.auc:.6f}", "logloss": f"{self.logloss:.6f}",
                "n": self.n, "rel_impr": "" if self.rel_impr is None else f"{self.rel_impr:.2f}",
                "base": self.base or ""}
