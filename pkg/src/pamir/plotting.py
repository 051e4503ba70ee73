"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamps in the file, so repeated runs write identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def plot_loss_trace(trace, path, title: str = "training loss"):
    """Geometry / texture loss per iteration (log scale) from a training trace."""
    plt = _pyplot()
    it = np.array([r["iter"] for r in trace])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("geometry_loss", "texture_loss"):
        y = np.array([r[key] for r in trace], dtype=float)
        if np.any(y > 0):
            ax.plot(it, y, label=key.replace("_", " "), lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_optim_trace(trace, path):
    """Objective, fitting and regularization terms of a body optimization run."""
    plt = _pyplot()
    it = np.array([r["iter"] for r in trace])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r["objective"] for r in trace], label="objective")
    ax.plot(it, [r["fitting"] for r in trace], label="fitting", ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_distance_histogram(distances, path, title: str = "point-to-surface distance"):
    plt = _pyplot()
    d = np.asarray(distances, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(d * 100.0, bins=50)
    ax.set_xlabel("distance [cm]")
    ax.set_ylabel("samples")
    ax.set_title(title)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out
