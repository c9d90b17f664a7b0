"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .filters import FilterBank, kernel_stack  # noqa: E402


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training_curves(losses, val_dice, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = np.arange(len(losses))
    ax.plot(epochs, losses, color="tab:blue", marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (0.5 CE + 0.5 soft Dice)", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, val_dice, color="tab:red", marker="s", ms=3, label="val mean Dice")
    ax2.set_ylabel("val mean Dice", color="tab:red")
    ax2.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    _finish(fig, path)


def plot_filter_banks(initial: FilterBank, final: FilterBank, path) -> None:
    """Kernel grid: initial filters on the top row, learned filters below."""
    n = initial.n_filters
    if n == 0:
        return
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n + 0.6, 3.6), squeeze=False)
    for row, (bank, tag) in enumerate(((initial, "init"), (final, "final"))):
        kernels = kernel_stack(bank)[:, 0]
        for j in range(n):
            ax = axes[row, j]
            k = kernels[j]
            lim = max(np.abs(k).max(), 1e-12)
            ax.imshow(k, cmap="RdBu_r", vmin=-lim, vmax=lim)
            kind = "Gabor" if j < bank.n_gabor else "LoG"
            ax.set_title(f"{tag} {kind} {j}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    _finish(fig, path)


def plot_metrics(report, path) -> None:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    ids = [str(c) for c in report.class_ids]
    a1.bar(ids, report.per_class_dice, color="tab:green")
    a1.set_ylim(0, 1)
    a1.set_title(f"Dice (mean {report.mean_dice:.3f})")
    a1.set_xlabel("class")
    a2.bar(ids, report.per_class_hd95, color="tab:purple")
    a2.set_title(f"HD95 px (mean {report.mean_hd95:.2f})")
    a2.set_xlabel("class")
    _finish(fig, path)


def plot_ablation(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = [f"{r['variant']}\n(+{r['extra_params']})" for r in rows]
    vals = [r["mean_dice"] for r in rows]
    bars = ax.bar(names, vals, color=["0.6", "tab:orange", "tab:cyan", "tab:red"][: len(rows)])
    for b, v in zip(bars, vals):
        ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("val mean Dice")
    _finish(fig, path)
