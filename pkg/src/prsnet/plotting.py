"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

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
    "savefig.dpi": 120,
}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(losses, path, title: str = "", smooth: int = 10, ylabel: str = "loss") -> Path:
    losses = np.asarray(losses, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(losses, lw=0.8, alpha=0.5, label="per step")
        if smooth > 1 and len(losses) >= smooth:
            kernel = np.ones(smooth) / smooth
            ax.plot(np.arange(smooth - 1, len(losses)), np.convolve(losses, kernel, mode="valid"),
                    lw=1.5, label=f"mean of {smooth}")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if losses.size and losses.min() > 0:
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _finish(fig, path)


def cmc_curve(reports: dict, path, max_rank: int = 20) -> Path:
    """One CMC line per labelled ``RetrievalReport``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for label, rep in reports.items():
            cmc = np.asarray(rep.cmc)[:max_rank]
            ax.plot(np.arange(1, len(cmc) + 1), cmc, marker="o", ms=3, label=f"{label} (mAP {rep.mAP:.3f})")
        ax.set_xlabel("rank k")
        ax.set_ylabel("CMC")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="lower right")
        return _finish(fig, path)


def reconstruction_panel(triples, path, titles=("original", "masked", "reconstruction")) -> Path:
    """Rows of (original, masked, reconstruction) [3, H, W] images."""
    n = len(triples)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(3.6, 2.2 * n), squeeze=False)
        for r, row in enumerate(triples):
            for c, img in enumerate(row):
                ax = axes[r, c]
                ax.imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(titles[c])
        return _finish(fig, path)


def gradcheck_bars(rows, path, threshold: float = 1e-5) -> Path:
    names = [r[0] for r in rows]
    errs = np.maximum([r[1] for r in rows], 1e-18)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.22 * len(rows) + 1))
        colors = ["tab:green" if e < threshold else "tab:red" for e in errs]
        ax.barh(names, errs, color=colors)
        ax.axvline(threshold, color="k", ls="--", lw=0.8)
        ax.set_xscale("log")
        ax.set_xlabel("max relative error")
        ax.invert_yaxis()
        return _finish(fig, path)


def ablation_bars(table: dict, path) -> Path:
    """``table`` maps loss name -> {"mAP": float, "rank1": float}."""
    labels = list(table)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        x = np.arange(len(labels))
        ax.bar(x - 0.2, [table[k]["mAP"] for k in labels], width=0.4, label="mAP")
        ax.bar(x + 0.2, [table[k]["rank1"] for k in labels], width=0.4, label="Rank-1")
        ax.set_xticks(x, labels)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        return _finish(fig, path)
