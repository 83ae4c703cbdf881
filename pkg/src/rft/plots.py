"""Figure rendering for training logs and evaluation reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalkit import SUCCESS_THRESHOLDS, SuccessRates


def plot_training_curves(log_csv, out_png) -> Path:
    """Loss components and ranking quality against the training step."""
    with open(log_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty training log: {log_csv}")
    steps = np.array([int(r["step"]) for r in rows])

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key in ("total", "l_rep", "l_ap", "l_cosim"):
        ax1.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=1.2)
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)

    ax2.plot(steps, [float(r["mean_ap"]) for r in rows], label="mean_ap", linewidth=1.2)
    ax2.plot(steps, [float(r["kappa"]) for r in rows], label="kappa", linewidth=1.2)
    ax2.plot(steps, [float(r["lr"]) / max(float(rows[0]["lr"]), 1e-12) for r in rows],
             label="lr (relative)", linewidth=1.0, linestyle="--")
    ax2.set_xlabel("step")
    ax2.set_ylabel("schedule / quality")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(alpha=0.3)

    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_success_rates(rows: list[tuple[str, SuccessRates]], out_png) -> Path:
    """Grouped bars: one group per threshold, one bar per configuration."""
    labels = [f"({tm}m, {td:g}\N{DEGREE SIGN})" for tm, td in SUCCESS_THRESHOLDS]
    x = np.arange(len(labels))
    n = max(len(rows), 1)
    width = 0.8 / n

    fig, ax = plt.subplots(figsize=(6.5, 4))
    for i, (name, sr) in enumerate(rows):
        ax.bar(x + (i - (n - 1) / 2) * width, sr.rates, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("localization success rate [%]")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)

    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def load_success_csv(path) -> list[tuple[str, SuccessRates]]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [
        (r["config"], SuccessRates((float(r["threshold1"]), float(r["threshold2"]),
                                    float(r["threshold3"]))))
        for r in rows
    ]


def plot_warp_metrics(rows: list[dict], out_png) -> Path:
    """Per-image repeatability / matching accuracy bars from eval-warp rows."""
    images = sorted({r["image"] for r in rows})
    rep = [np.mean([float(r["repeatability"]) for r in rows if r["image"] == im]) for im in images]
    mma = [np.mean([float(r["mma"]) for r in rows if r["image"] == im]) for im in images]
    x = np.arange(len(images))

    fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(images) + 2), 4))
    ax.bar(x - 0.2, rep, 0.4, label="repeatability")
    ax.bar(x + 0.2, mma, 0.4, label="matching accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels([Path(im).stem for im in images], rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)

    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
