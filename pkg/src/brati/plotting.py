"""Figures written next to the JSON/CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figsize(width=6.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * golden


def plot_training_curve(log: list[dict], path) -> None:
    """Training loss and validation MAE per epoch (log scale)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        epochs = [row["epoch"] for row in log]
        ax.plot(epochs, [row["total"] for row in log], label="train total loss")
        ax.plot(epochs, [row["val_mae"] for row in log], label="validation masked MAE")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_ablation(rows: list[dict], path, metric: str = "mae") -> None:
    """Grouped bars: one group per scenario, one bar per model."""
    scenarios = list(dict.fromkeys(r["scenario"] for r in rows))
    models = list(dict.fromkeys(r["model"] for r in rows))
    values = {(r["scenario"], r["model"]): r[metric] for r in rows}
    width = 0.8 / len(models)
    x = np.arange(len(scenarios))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        for i, model in enumerate(models):
            heights = [values.get((s, model), np.nan) for s in scenarios]
            ax.bar(x + (i - (len(models) - 1) / 2) * width, heights, width, label=model)
        ax.set_xticks(x)
        ax.set_xticklabels(scenarios)
        ax.set_ylabel(f"masked {metric.upper()}")
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
