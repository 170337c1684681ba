"""Report figures rendered to files next to the CSV outputs."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("L_r", "L_e", "L_c", "L_y", "L_G", "L_R", "L_total")
U_KEYS = ("u_r", "u_e", "u_c")
THETA_KEYS = ("theta_r2", "theta_e2", "theta_c2", "theta_G2", "theta_R2")


def read_metrics_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _finite(rows: Sequence[Mapping[str, float]], key: str) -> bool:
    return any(key in r and not math.isnan(r[key]) for r in rows)


def _plot_series(ax, rows, keys, ylabel: str, logy: bool = False) -> None:
    epochs = [r["epoch"] for r in rows]
    drawn = 0
    for k in keys:
        if _finite(rows, k):
            ax.plot(epochs, [r[k] for r in rows], marker="o", ms=3, label=k)
            drawn += 1
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if logy and drawn:
        ax.set_yscale("log")
    if drawn:
        ax.legend(fontsize=7, frameon=False)
    ax.grid(alpha=0.3)


def plot_training_curves(rows: Sequence[Mapping[str, float]], path) -> Path:
    """Three panels: losses, fusion weights u, temperatures theta^2."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    _plot_series(axes[0], rows, LOSS_KEYS, "loss")
    _plot_series(axes[1], rows, U_KEYS, "u")
    _plot_series(axes[2], rows, THETA_KEYS, r"$\theta^2$", logy=True)
    axes[0].set_title("losses")
    axes[1].set_title("fusion weights")
    axes[2].set_title("temperatures")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy_bars(results: Mapping[str, tuple], path, title: Optional[str] = None) -> Path:
    """Bar chart of ``{label: (acc %, ci95 %)}`` with CI error bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = list(results)
    accs = [results[k][0] for k in labels]
    cis = [results[k][1] for k in labels]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 1.5), 3.6))
    ax.bar(labels, accs, yerr=cis, capsize=4, color="#4c72b0")
    lo = max(0.0, min(a - c for a, c in zip(accs, cis)) - 5)
    ax.set_ylim(lo, min(100.0, max(a + c for a, c in zip(accs, cis)) + 3))
    ax.set_ylabel("accuracy (%)")
    if title:
        ax.set_title(title)
    for i, a in enumerate(accs):
        ax.text(i, a, f"{a:.1f}", ha="center", va="bottom", fontsize=8)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
