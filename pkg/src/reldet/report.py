"""Evaluation report figures, rendered headlessly to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluate import EvalResult

__all__ = ["render_pr_curves", "render_ap_bars"]


def render_pr_curves(result: EvalResult, out_dir: str | Path) -> list[Path]:
    """One precision-recall figure per evaluated class; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for class_id, entry in sorted(result.per_class.items()):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        recalls = [0.0, *entry.recalls]
        precisions = [1.0, *entry.precisions] if entry.recalls.size else [1.0, 0.0]
        if entry.recalls.size == 0:
            recalls = [0.0, 0.0]
        ax.step(recalls, precisions, where="post")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0.0, 1.05)
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"class {class_id}: AP = {entry.ap:.4f}")
        ax.grid(True, alpha=0.3)
        path = out_dir / f"pr_class_{class_id}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def render_ap_bars(result: EvalResult, path: str | Path) -> Path:
    """Bar chart of per-class AP with the mean drawn as a reference line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    classes = sorted(result.per_class)
    aps = [result.per_class[c].ap for c in classes]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(classes)), 4.0))
    ax.bar([str(c) for c in classes], aps, color="#4878cf")
    ax.axhline(result.mean_ap, color="#d65f5f", linestyle="--",
               label=f"mAP = {result.mean_ap:.4f}")
    ax.set_xlabel("class")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
