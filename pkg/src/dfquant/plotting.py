"""Figure rendering to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def plot_cka_heatmap(matrix, path, title: str = "teacher vs quantized student") -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        n_t, n_s = matrix.values.shape
        fig, ax = plt.subplots(figsize=(1.2 + 0.35 * n_s, 1.0 + 0.35 * n_t))
        im = ax.imshow(matrix.values, vmin=0.0, vmax=1.0, cmap="magma", origin="lower")
        ax.set_xticks(range(n_s), matrix.student_layers, rotation=90)
        ax.set_yticks(range(n_t), matrix.teacher_layers)
        ax.set_xlabel("student layer")
        ax.set_ylabel("teacher layer")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="linear CKA")
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_sweep(result, path) -> Path:
    """Mean accuracy per lambda with one-std error bars; individual seeds as dots."""
    path = Path(path)
    lams = [s[0] for s in result.summary]
    # symlog keeps lambda = 0 on the axis next to the positive values
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.errorbar(lams, [s[1] for s in result.summary], yerr=[s[2] for s in result.summary],
                    marker="o", capsize=3, color="C0", label="mean ± std")
        ax.scatter([r[0] for r in result.rows], [r[2] for r in result.rows],
                   s=8, color="0.5", zorder=3, label="seed")
        positive = [l for l in lams if l > 0]
        ax.set_xscale("symlog", linthresh=min(positive) if positive else 1.0)
        ax.set_xlabel(r"$\lambda$")
        ax.set_ylabel("test accuracy")
        ax.grid(alpha=0.3, lw=0.5)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path
