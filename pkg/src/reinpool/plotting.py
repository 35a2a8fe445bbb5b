"""Figures written next to the delimited reports.

``plot_report`` draws retrieval quality against embedding cost, one marker
per method. ``plot_training`` draws reward, kept fraction and validation
NDCG from a metrics CSV.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "reinpool",
}

_FAMILY_MARKERS = {"full": "s", "maxsim": "D", "static": "o", "reinpool": "*"}
_KIND_COLORS = {"mean": "tab:blue", "max": "tab:orange"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def plot_report(report, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for r in report.results:
            family, _, kind = r.method.partition("-")
            ax.scatter(r.mean_vectors * r.dim, 100 * r.average,
                       marker=_FAMILY_MARKERS.get(family, "o"),
                       color=_KIND_COLORS.get(kind, "tab:gray"),
                       s=90 if family == "reinpool" else 45, label=r.method, zorder=3)
        ax.set_xscale("log")
        ax.set_xlabel("embedding cost (floats per document)")
        ax.set_ylabel(f"NDCG@{report.k} (avg, x100)")
        ax.set_ylim(bottom=0)
        ax.grid(alpha=0.3, which="both")
        ax.legend(fontsize=7, loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_training(rows, path) -> Path:
    """``rows`` are dicts as returned by ``trainer.read_metrics``."""
    steps = [r["step"] for r in rows]
    val = [(r["step"], r["val_ndcg3"]) for r in rows if r.get("val_ndcg3") is not None]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        axes[0].plot(steps, [r["mean_reward"] for r in rows], lw=0.6, alpha=0.6, label="train reward")
        if val:
            axes[0].plot(*zip(*val), marker="o", ms=3, label="val NDCG@3")
        axes[0].set_xlabel("step")
        axes[0].legend(fontsize=7)
        axes[1].plot(steps, [r["kept_fraction"] for r in rows], lw=0.8, color="tab:green")
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("kept fraction")
        axes[1].set_ylim(0, 1)
        fig.tight_layout()
        return _save(fig, path)
