"""Report figures, rendered headless to image files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import PredictionTrace, weighted_roc  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def roc_figure(traces: dict[str, PredictionTrace], path: str) -> str:
    """Plain and time-weighted ROC curves for each labelled trace."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.8), sharey=True)
        for ax, weighted, title in ((axes[0], False, "ROC"), (axes[1], True, "weighted ROC")):
            for label, t in traces.items():
                fpr, tpr = weighted_roc(t.probs, t.labels, t.weights if weighted else None)
                ax.plot(fpr, tpr, lw=1.2, label=label)
            ax.plot([0, 1], [0, 1], color="0.6", ls=":", lw=0.8)
            ax.set_xlabel("false positive rate")
            ax.set_title(title)
            ax.set_aspect("equal")
        axes[0].set_ylabel("true positive rate")
        axes[1].legend(loc="lower right", frameon=False)
        return _save(fig, path)


def fold_metrics_figure(reports: dict[str, dict], path: str, keys=("auc", "wauc", "r2")) -> str:
    """Grouped bars of per-fold means with fold spread as error bars; ``reports`` maps model to report dict."""
    models = list(reports)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3.2))
        axes = np.atleast_1d(axes)
        x = np.arange(len(models))
        for ax, key in zip(axes, keys):
            vals = [[f[key] for f in reports[m]["folds"]] for m in models]
            ax.bar(x, [np.mean(v) for v in vals], yerr=[np.std(v) for v in vals], color="0.55",
                   edgecolor="0.2", capsize=3, width=0.6)
            for i, v in enumerate(vals):
                ax.scatter(np.full(len(v), i), v, s=8, color="k", zorder=3)
            ax.set_xticks(x)
            ax.set_xticklabels(models, rotation=30, ha="right")
            ax.set_title(key)
            if key != "r2":
                lo = min(min(v) for v in vals)
                ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        return _save(fig, path)


def search_history_figure(measured, path: str, predicted=None, depths=None) -> str:
    """Measured score per evaluation with the running best, plus surrogate predictions when given."""
    measured = np.asarray(measured, dtype=np.float64)
    it = np.arange(1, len(measured) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.4))
        c = None if depths is None else np.asarray(depths)
        sc = ax.scatter(it, measured, c=c, s=14, cmap="viridis", label="measured")
        ax.step(it, np.maximum.accumulate(measured), where="post", color="k", lw=1.2, label="best so far")
        if predicted is not None:
            pred = np.array([np.nan if p is None else p for p in predicted], dtype=np.float64)
            ax.scatter(it, pred, marker="x", s=12, color="tab:red", label="surrogate")
        if depths is not None:
            fig.colorbar(sc, ax=ax, label="depth", ticks=np.unique(c))
        ax.set_xlabel("evaluation")
        ax.set_ylabel("validation AUC")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)
