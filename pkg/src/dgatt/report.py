"""Figure rendering for the report paths: training curves, probe-accuracy
bars, ablation comparisons, and heatmap/attention overlays.

Every figure lands next to the CSV it illustrates; the Agg backend keeps
rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history, path) -> None:
    """Loss components and train accuracy vs epoch."""
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(epochs, [r.loss_total for r in history], label="total", lw=1.6)
    for attr, label in (("loss_rgb", "rgb aux"), ("loss_guidance", "guidance aux"),
                        ("loss_attention", "main head")):
        vals = [getattr(r, attr) for r in history]
        if any(v is not None for v in vals):
            ax_loss.plot(epochs, vals, label=label, lw=1.0, alpha=0.8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_acc.plot(epochs, [r.train_acc for r in history], color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("train accuracy")
    ax_acc.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(report, path) -> None:
    """Bar chart of rank-1 accuracy per probe set."""
    names = sorted(report.per_set)
    accs = [report.accuracy(k) for k in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.2))
    bars = ax.bar(names, accs, color="tab:blue", width=0.6)
    ax.axhline(report.average, color="tab:orange", lw=1.2, ls="--",
               label=f"average {report.average:.3f}")
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rank-1 accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows, path) -> None:
    """Grouped bars (mean +/- std) per variant per probe set."""
    variants = list(dict.fromkeys(r.variant for r in rows))
    probe_sets = sorted({r.probe_set for r in rows})
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(probe_sets))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(probe_sets), 3.6))
    table = {(r.variant, r.probe_set): r for r in rows}
    for i, variant in enumerate(variants):
        means = [table[(variant, p)].mean_acc if (variant, p) in table else 0.0
                 for p in probe_sets]
        stds = [table[(variant, p)].std_acc if (variant, p) in table else 0.0
                for p in probe_sets]
        ax.bar(x + i * width, means, width=width * 0.92, yerr=stds,
               capsize=2, label=variant)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(probe_sets)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rank-1 accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(values: np.ndarray, path, rgb: np.ndarray | None = None,
                        title: str | None = None) -> None:
    """Heatmap (attention or CAM), optionally blended over the RGB raster."""
    fig, ax = plt.subplots(figsize=(3.4, 3.4))
    if rgb is not None:
        ax.imshow(rgb)
        extent = rgb.shape[0]
        if values.shape[0] != extent:
            factor = extent // values.shape[0]
            values = np.repeat(np.repeat(values, factor, axis=0), factor, axis=1)
        ax.imshow(values, cmap="jet", alpha=0.45)
    else:
        im = ax.imshow(values, cmap="viridis")
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
