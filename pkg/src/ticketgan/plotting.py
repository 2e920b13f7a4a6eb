"""Static figures rendered from the metric and sparsity CSVs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (5.0, 3.4)


def _style(ax, xlabel: str, ylabel: str, title: Optional[str] = None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def _column(rows: Sequence[Dict[str, str]], name: str) -> np.ndarray:
    return np.array([float(r[name]) if r.get(name, "") not in ("", None) else math.nan for r in rows])


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric_curves(runs: Dict[str, List[Dict[str, str]]], path) -> Path:
    """FID and IS against iteration, one line per run."""
    fig, (ax_fid, ax_is) = plt.subplots(1, 2, figsize=(2 * FIGSIZE[0], FIGSIZE[1]))
    for label, rows in runs.items():
        it = _column(rows, "iteration")
        ax_fid.plot(it, _column(rows, "fid"), label=label)
        is_mean, is_std = _column(rows, "is_mean"), _column(rows, "is_std")
        if np.isfinite(is_mean).any():
            ax_is.plot(it, is_mean, label=label)
            ax_is.fill_between(it, is_mean - is_std, is_mean + is_std, alpha=0.2)
    _style(ax_fid, "iteration", "FID (lower is better)")
    _style(ax_is, "iteration", "IS (higher is better)")
    ax_fid.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_accuracy_gap(runs: Dict[str, List[Dict[str, str]]], path) -> Path:
    """Discriminator accuracy on training reals vs held-out reals."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for i, (label, rows) in enumerate(runs.items()):
        it = _column(rows, "iteration")
        color = f"C{i}"
        ax.plot(it, 100 * _column(rows, "d_acc_train"), color=color, label=f"{label} train")
        ax.plot(it, 100 * _column(rows, "d_acc_val"), color=color, linestyle="--", label=f"{label} val")
    _style(ax, "iteration", "D accuracy (%)")
    ax.set_ylim(0, 102)
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_fid_vs_sparsity(series: Dict[str, Sequence[tuple]], path) -> Path:
    """``series`` maps a method name to ``(sparsity, fid)`` points."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, points in series.items():
        pts = sorted(points)
        ax.plot([100 * (1 - s) for s, _ in pts], [f for _, f in pts], marker="o", label=label)
    ax.invert_xaxis()
    _style(ax, "remaining weights (%)", "FID")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_sparsity_schedule(rows: Sequence[Dict[str, str]], path) -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    k = _column(rows, "round")
    ax.plot(k, 100 * _column(rows, "target"), "k:", label="1 - (1 - rho)^k")
    ax.plot(k, 100 * _column(rows, "sparsity_g"), "o", label="generator")
    ax.plot(k, 100 * _column(rows, "sparsity_d"), "x", label="discriminator")
    _style(ax, "IMP round", "sparsity (%)")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_ablation_bars(values: Dict[str, float], path, ylabel: str = "FID") -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    labels = list(values)
    ax.bar(range(len(labels)), [values[k] for k in labels], color="0.55")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    _style(ax, "", ylabel)
    return _save(fig, path)


def plot_ring_samples(samples: np.ndarray, centers: np.ndarray, path, title: Optional[str] = None) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.4)
    ax.scatter(centers[:, 0], centers[:, 1], marker="x", c="k", s=30)
    ax.set_aspect("equal")
    _style(ax, "x1", "x2", title)
    return _save(fig, path)
