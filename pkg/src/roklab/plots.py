"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
    "svg.hashsalt": "roklab",
}

# fixed metadata keeps re-rendered PNGs byte-identical
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_alpha_sweep(alphas, aucs, path, baseline_auc=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(alphas, aucs, marker="o", color="#1f5f8b", label="backbone + knowledge base")
        if baseline_auc is not None:
            ax.axhline(baseline_auc, ls="--", color="grey", lw=1, label="baseline backbone")
        ax.set_xlabel(r"$\alpha$ (contrastive weight)")
        ax.set_ylabel("test AUC")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_strategies(names, aucs, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(names, aucs, color="#c17150", width=0.6)
        lo = min(aucs)
        ax.set_ylim(lo - 0.02, max(aucs) + 0.01)
        for b, v in zip(bars, aucs):
            ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.4f}", ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("test AUC")
        return _save(fig, path)


def plot_latency(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, color in (("retrieval_teacher", "#8b1f1f"), ("kb_backbone", "#1f5f8b")):
            pts = sorted((t.pool_size, t.mean_ms) for t in report.timings
                         if t.path == name and t.threads == 1)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", color=color, label=name)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("pool size")
        ax.set_ylabel("ms per sample")
        ax.legend(frameon=False)
        return _save(fig, path)
