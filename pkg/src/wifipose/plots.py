"""Optional figures. matplotlib is imported lazily so nothing else depends on it."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import WifiPoseError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise WifiPoseError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_history(rows, path, title: str = "") -> Path:
    """One line per logged quantity against epoch."""
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in rows]
    for key in (k for k in (rows[0] if rows else {}) if k != "epoch"):
        values = np.array([r[key] for r in rows], dtype=float)
        if np.isfinite(values).any():
            ax.plot(epochs, values, label=key)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_pose_overlay(pred, gt, graph, path) -> Path:
    """Predicted (red) and ground-truth (black) skeletons, first two coordinates."""
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for pose, colour, label in ((gt, "k", "ground truth"), (pred, "r", "prediction")):
        pose = np.asarray(pose)
        for n, (i, j) in enumerate(graph.edges):
            ax.plot(pose[[i, j], 0], pose[[i, j], 1], colour, lw=1.5, label=label if n == 0 else None)
        ax.scatter(pose[:, 0], pose[:, 1], c=colour, s=8)
    ax.set_aspect("equal")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
