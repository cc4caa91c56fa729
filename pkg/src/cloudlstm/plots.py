"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import linear_fit  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metric_steps(reports, path) -> None:
    """Per-step mean of each metric, one panel per metric, one line per model."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.6))
        for ax, metric in zip(axes, ("MAE", "RMSE", "PSNR", "SSIM")):
            for rep in reports:
                stats = rep.per_step[metric]
                steps = np.arange(1, len(stats) + 1)
                ax.errorbar(steps, stats[:, 0], yerr=stats[:, 1], marker="o", ms=3,
                            capsize=2, lw=1, label=rep.name)
            ax.set_xlabel("forecast step")
            ax.set_title(metric)
        axes[0].legend(frameon=False)
        _save(fig, path)


def plot_loss(loss_log, path) -> None:
    epochs = [e for e, _, _ in loss_log]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.semilogy(epochs, [t for _, t, _ in loss_log], label="train")
        val = [v for _, _, v in loss_log]
        if not all(np.isnan(val)):
            ax.semilogy(epochs, val, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_bench(rows, path) -> None:
    n = np.array([r["n"] for r in rows], dtype=float)
    s = np.array([r["seconds"] for r in rows])
    a, b, r2 = linear_fit(n, s)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(n, s * 1e3, "o", label="measured")
        ax.plot(n, (a * n + b) * 1e3, "-", lw=1, label=f"linear fit, R²={r2:.3f}")
        ax.set_xlabel("points N")
        ax.set_ylabel("time [ms]")
        ax.set_title(f"{rows[0]['suite']} (K={rows[0]['k']}, L={rows[0]['l']})")
        ax.legend(frameon=False)
        _save(fig, path)
