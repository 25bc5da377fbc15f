"""Matplotlib figure rendering for the CLI report paths.

Figures always go to files (Agg backend); nothing here opens a window.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_history_figure(history, path) -> None:
    """Loss and accuracy curves for one training run."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [row["loss"] for row in history], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_acc.plot(epochs, [row["train_acc"] for row in history], label="train")
    val = [row["val_acc"] for row in history]
    if not all(np.isnan(v) for v in val):
        ax_acc.plot(epochs, val, label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(metrics, probs, labels, path) -> None:
    """Metric bars next to the per-class probability histogram."""
    fig, (ax_bar, ax_hist) = plt.subplots(1, 2, figsize=(9, 3.5))
    names, values = ["ACC"], [metrics.accuracy]
    if metrics.sensitivity is not None:
        names.append("SEN")
        values.append(metrics.sensitivity)
    if metrics.specificity is not None:
        names.append("SPE")
        values.append(metrics.specificity)
    ax_bar.bar(names, values, color="tab:blue")
    ax_bar.set_ylim(0.0, 1.05)
    for x, v in enumerate(values):
        ax_bar.text(x, v + 0.02, f"{v:.3f}", ha="center")

    probs = np.asarray(probs)
    labels = np.asarray(labels)
    bins = np.linspace(0.0, 1.0, 21)
    for cls, color in ((0, "tab:green"), (1, "tab:orange")):
        sel = probs[labels == cls]
        if sel.size:
            ax_hist.hist(sel, bins=bins, alpha=0.6, color=color, label=f"class {cls}")
    ax_hist.axvline(0.5, color="k", linestyle="--", linewidth=0.8)
    ax_hist.set_xlabel("predicted probability")
    ax_hist.set_ylabel("count")
    ax_hist.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
