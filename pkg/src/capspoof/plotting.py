"""Report figures. Everything renders to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from capspoof.evalkit import HIST_WIDTH  # noqa: E402


def set_style() -> None:
    plt.rcParams.update({
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "figure.dpi": 100,
        "savefig.bbox": "tight",
        "svg.hashsalt": "capspoof",
    })


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_statistic_hist(groups: Mapping[str, Sequence[float]], path, threshold: float | None = None,
                        xlabel: str = "z-score") -> Path:
    """Overlaid histograms of detection statistics, one per labelled group."""
    set_style()
    fig, ax = plt.subplots(figsize=(5, 3))
    allv = np.concatenate([np.asarray(v, dtype=float) for v in groups.values()])
    lo = np.floor(allv.min() / HIST_WIDTH) * HIST_WIDTH
    hi = np.ceil(allv.max() / HIST_WIDTH) * HIST_WIDTH + HIST_WIDTH
    bins = np.arange(lo, hi + HIST_WIDTH / 2, HIST_WIDTH)
    for label, vals in groups.items():
        ax.hist(vals, bins=bins, alpha=0.55, label=label)
    if threshold is not None:
        ax.axvline(threshold, color="k", ls="--", lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_curves(epochs: Sequence[dict], path) -> Path:
    """Per-epoch eval summaries: mean detection statistic, SSR and SR, mean similarity."""
    set_style()
    x = np.arange(len(epochs))
    stat_key = next((k for k in epochs[0] if k.startswith("mean_") and k != "mean_sem"), None)
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.6))
    if stat_key:
        axes[0].plot(x, [e[stat_key] for e in epochs], marker="o")
        axes[0].set_ylabel(stat_key.replace("mean_", "mean "))
    axes[1].plot(x, [e["ssr"] for e in epochs], marker="o", label="SSR")
    axes[1].plot(x, [e["sr"] for e in epochs], marker="s", label="SR")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].legend(frameon=False)
    axes[2].plot(x, [e["mean_sem"] for e in epochs], marker="o")
    axes[2].set_ylabel("mean similarity")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path)


def plot_capacity_profile(rows: Sequence[dict], path) -> Path:
    """Mean token reward and mean |llr| per decile of the capacity weight."""
    set_style()
    c = [r["mean_c"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(c, [r["mean_r"] for r in rows], marker="o", label="mean reward")
    ax.plot(c, [r["mean_abs_llr"] for r in rows], marker="s", label="mean |llr|")
    ax.set_xlabel("capacity weight c (decile mean)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(grid: Sequence[dict], path) -> Path:
    """SSR and SR per variant, averaged over seeds."""
    set_style()
    names = list(dict.fromkeys(r["variant"] for r in grid))
    ssr = [np.mean([r["ssr"] for r in grid if r["variant"] == n]) for n in names]
    sr = [np.mean([r["sr"] for r in grid if r["variant"] == n]) for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3))
    ax.bar(x - 0.2, ssr, 0.4, label="SSR")
    ax.bar(x + 0.2, sr, 0.4, label="SR")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)
