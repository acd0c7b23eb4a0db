"""Figure rendering for the analyze pipeline.

Each diagnostics CSV gets a sibling PNG: a bar chart of the magnitude
shares, a heatmap of the mean pairwise cosines, and the conflict
fraction traced over the analysis window.  Rendering is headless (Agg)
and file-only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import CosineProfile


def render_magnitudes(path, profile: np.ndarray, labels):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(profile)), profile, color="tab:blue")
    ax.set_xticks(range(len(profile)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean normalized magnitude")
    ax.axhline(1.0 / len(profile), color="gray", linestyle="--", linewidth=1,
               label="uniform share")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_cosines(path, profile: CosineProfile, labels):
    n = profile.mean.shape[0]
    fig, (ax_m, ax_f) = plt.subplots(1, 2, figsize=(9, 4))
    for ax, data, title in [
        (ax_m, profile.mean, "mean pairwise cosine"),
        (ax_f, profile.negative_fraction, "negative-cosine fraction"),
    ]:
        vmax = 1.0
        vmin = -1.0 if data.min() < 0 else 0.0
        im = ax.imshow(data, vmin=vmin, vmax=vmax, cmap="RdBu_r" if vmin < 0 else "viridis")
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_yticklabels(labels, fontsize=7)
        ax.set_title(title, fontsize=9)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{data[i, j]:.2f}", ha="center", va="center", fontsize=6)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_conflict(path, steps, fractions, mean_rate: float):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, fractions, linewidth=0.8, color="tab:red")
    ax.axhline(mean_rate, color="black", linestyle="--", linewidth=1,
               label=f"window mean {mean_rate:.3f}")
    ax.set_xlabel("training step")
    ax.set_ylabel("conflict fraction")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
