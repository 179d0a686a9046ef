"""Static figures for reports: KL histograms with the threshold marker, sweep metrics.

Figures are written as SVG with a fixed hash salt and no date stamp so two
identical runs give identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "bvood",
    "svg.fonttype": "none",
}

SERIES_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd")


def figure(width: float = 5.0, height: float | None = None, ncols: int = 1):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    height = width * golden if height is None else height
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, ncols, figsize=(width, height))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, format=path.suffix.lstrip(".") or "svg", bbox_inches="tight",
                    metadata={"Date": None} if path.suffix in ("", ".svg") else None)
    plt.close(fig)
    return path


def histogram_counts(series: Mapping[str, Sequence[float]], bins: int = 30,
                     extra: Sequence[float] = ()) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Counts per series over shared bin edges covering every value (and ``extra``)."""
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in series.values()]
                            + [np.asarray(extra, dtype=np.float64).ravel()])
    if pooled.size == 0:
        pooled = np.zeros(1)
    edges = np.histogram_bin_edges(pooled, bins=bins)
    counts = {name: np.histogram(np.asarray(v, dtype=np.float64), bins=edges)[0]
              for name, v in series.items()}
    return edges, counts


def kl_histogram(series: Mapping[str, Sequence[float]], tau: float | None, path,
                 bins: int = 30, title: str = "") -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Overlaid KL histograms with a vertical threshold line; returns the binned counts."""
    extra = [] if tau is None else [tau]
    edges, counts = histogram_counts(series, bins, extra)
    fig, ax = figure()
    with plt.rc_context(STYLE):
        for (name, c), color in zip(counts.items(), SERIES_COLORS * 4):
            ax.stairs(c, edges, fill=True, alpha=0.45, color=color, label=f"{name} (n={c.sum()})")
        if tau is not None:
            ax.axvline(tau, color="k", linestyle="--", linewidth=1.0, label=f"tau = {tau:.4g}")
        ax.set_xlabel("KL divergence of selected latent")
        ax.set_ylabel("images")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
    save(fig, path)
    return edges, counts


def sweep_metrics(rows: Sequence[Mapping[str, float]], path) -> Path:
    """Average validation KL and MSE for every (beta, nLatent) cell, one panel each."""
    n_latents = sorted({int(r["nLatent"]) for r in rows})
    betas = sorted({float(r["beta"]) for r in rows})
    fig, axes = figure(width=8.0, height=3.0, ncols=2)
    width = 0.8 / max(len(n_latents), 1)
    x = np.arange(len(betas))
    with plt.rc_context(STYLE):
        for ax, key, label in zip(axes, ("avg_kl", "val_mse"), ("average KL (validation)",
                                                                "reconstruction MSE (validation)")):
            for k, (n, color) in enumerate(zip(n_latents, SERIES_COLORS * 4)):
                vals = []
                for b in betas:
                    hit = [r[key] for r in rows if int(r["nLatent"]) == n and float(r["beta"]) == b]
                    vals.append(hit[0] if hit else np.nan)
                ax.bar(x + k * width, vals, width, color=color, label=f"nLatent={n}")
            ax.set_xticks(x + width * (len(n_latents) - 1) / 2, [f"{b:g}" for b in betas])
            ax.set_xlabel("beta")
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
    return save(fig, path)


def reconstructions(originals: np.ndarray, recons: np.ndarray, path, labels: Sequence[str] = ()) -> Path:
    """Originals (top row) above their mean reconstructions (bottom row)."""
    n = max(len(originals), 1)
    with plt.rc_context(STYLE):
        fig, grid = plt.subplots(2, n, figsize=(1.1 * n, 2.4), squeeze=False)
    for i in range(len(originals)):
        for row, img in ((0, originals[i]), (1, recons[i])):
            ax = grid[row, i]
            ax.imshow(np.asarray(img).reshape(32, 32), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
        if i < len(labels):
            grid[0, i].set_title(labels[i], fontsize=7)
    return save(fig, path)
