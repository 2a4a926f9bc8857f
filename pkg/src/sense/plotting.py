"""Figures for the CLI report paths. Every function writes one file and returns its path."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_WIDTH = 6.0
GOLDEN = (np.sqrt(5) - 1.0) / 2.0


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def probability_panel(left: np.ndarray, prob: np.ndarray, path, prompt: str = "", target=None):
    """Left view, sigmoid map and overlay side by side (ground truth contour when given)."""
    fig, axes = plt.subplots(1, 3, figsize=(3 * 3.2, 3.4))
    axes[0].imshow(left)
    axes[0].set_title("left view")
    im = axes[1].imshow(prob, cmap="magma", vmin=0, vmax=1)
    axes[1].set_title("probability")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[2].imshow(left)
    axes[2].imshow(prob, cmap="Reds", alpha=0.55, vmin=0, vmax=1)
    if target is not None:
        axes[2].contour(np.asarray(target, dtype=float), levels=[0.5], colors="cyan", linewidths=0.8)
    axes[2].set_title(f'"{prompt}"' if prompt else "overlay")
    for ax in axes:
        ax.set_axis_off()
    return _finish(fig, path)


def loss_curve(losses: Sequence[float], lrs: Sequence[float] | None, path):
    fig, ax = plt.subplots(figsize=(FIG_WIDTH, FIG_WIDTH * GOLDEN))
    ax.plot(np.arange(len(losses)), losses, lw=1.2, color="black", label="loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    if lrs is not None:
        ax2 = ax.twinx()
        ax2.plot(np.arange(len(lrs)), lrs, lw=1.0, ls="--", color="tab:blue")
        ax2.set_ylabel("learning rate", color="tab:blue")
    return _finish(fig, path)


def ablation_bars(rows: Sequence[Mapping], path, metrics=("miou", "iou_fg", "ap")):
    """Grouped bars per cell; error bars are the across-seed standard deviation when present."""
    labels = [r["label"] + (" †" if r.get("default") else "") for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(FIG_WIDTH, 0.9 * len(rows) + 2), 3.8))
    for k, m in enumerate(metrics):
        vals = [r[m] for r in rows]
        err = [r.get(f"{m}_std", 0.0) for r in rows]
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, vals, width, yerr=err, capsize=2, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, ncol=len(metrics))
    return _finish(fig, path)


def runtime_bars(report: Mapping, path):
    parts = ["disparity_ms", "encode_ms", "decode_ms", "tiling_ms"]
    fig, ax = plt.subplots(figsize=(FIG_WIDTH, 2.6))
    left = 0.0
    for p in parts:
        ax.barh(["with disparity"], [report[p]], left=left, label=p.replace("_ms", ""))
        left += report[p]
    ax.barh(["without disparity"], [report["total_without_disparity_ms"]], color="grey")
    ax.set_xlabel("ms per query (median)")
    ax.legend(fontsize=8, ncol=4, loc="lower right")
    return _finish(fig, path)


def pr_curve(scores: np.ndarray, labels: np.ndarray, path, ap: float | None = None):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-s, kind="mergesort")
    tp = np.cumsum(y[order])
    precision = tp / np.arange(1, y.size + 1)
    recall = tp / max(int(y.sum()), 1)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.step(recall, precision, where="post", color="black", lw=1.0)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if ap is not None:
        ax.set_title(f"AP = {ap:.3f}")
    return _finish(fig, path)


def label_map(labels: np.ndarray, class_names: Sequence[str], path, palette: Mapping[int, Sequence[int]] | None = None):
    """Color-coded label raster with a legend."""
    colors = label_colors(len(class_names), palette)
    fig, ax = plt.subplots(figsize=(5.0, 5.0 * labels.shape[0] / labels.shape[1] + 0.6))
    ax.imshow(colors[labels])
    ax.set_axis_off()
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[i] / 255.0) for i in range(len(class_names))]
    ax.legend(handles, class_names, fontsize=7, loc="upper center", bbox_to_anchor=(0.5, -0.01), ncol=4)
    return _finish(fig, path)


def label_colors(n: int, palette: Mapping[int, Sequence[int]] | None = None) -> np.ndarray:
    cmap = plt.get_cmap("tab20")
    colors = np.array([np.array(cmap(i % 20)[:3]) * 255 for i in range(n)], dtype=np.uint8)
    for k, rgb in (palette or {}).items():
        if 0 <= int(k) < n:
            colors[int(k)] = np.asarray(rgb, dtype=np.uint8)
    return colors
