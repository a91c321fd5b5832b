"""Static figures: PR curves per IoU threshold and per-video score timelines."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import IOU_THRESHOLDS, pr_curve  # noqa: E402


def plot_pr_curves(preds, gts, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for t in IOU_THRESHOLDS:
        r, p = pr_curve(preds, gts, t)
        ax.step(np.concatenate([[0.0], r]), np.concatenate([[1.0], p]), where="post", label=f"IoU {t:.1f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_timeline(video_id: str, fps: float, score, gate, gt_intervals, pred_intervals, path) -> None:
    """Frame score and VO gate over time, ground truth shaded, predictions as bars."""
    t = np.arange(len(score)) / fps
    fig, ax = plt.subplots(figsize=(10, 3))
    for iv in gt_intervals:
        ax.axvspan(iv.start, iv.end, color="tab:green", alpha=0.25, lw=0)
    ax.plot(t, score, color="tab:red", lw=1, label="defect score")
    ax.plot(t, np.clip(gate, 0, None) / max(float(np.max(gate)), 1e-9), color="tab:blue", lw=0.8, alpha=0.7,
            label="VO gate (scaled)")
    for iv in pred_intervals:
        ax.hlines(-0.05, iv.start, iv.end, color="k", lw=3, alpha=min(1.0, 0.2 + iv.score))
    ax.set_ylim(-0.1, 1.05)
    ax.set_xlabel("time (s)")
    ax.set_title(video_id, fontsize=9)
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=90)
    plt.close(fig)
