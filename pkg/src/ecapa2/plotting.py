"""Matplotlib figures for reports; rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    fig.clf()
    return path


def plot_attribution(values: np.ndarray, path, title: str = "", cmap: str = "viridis") -> Path:
    """Frequency x time heatmap with frequency increasing upwards."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(values, origin="lower", aspect="auto", cmap=cmap)
    ax.set_xlabel("frame")
    ax.set_ylabel("frequency bin")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_profile(profiles: dict, path, title: str = "") -> Path:
    """Frequency profiles (label -> vector) on shared axes."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, prof in profiles.items():
        ax.plot(np.arange(len(prof)), prof, label=label)
    ax.set_xlabel("frequency bin")
    ax.set_ylabel("normalized gradient")
    ax.set_title(title)
    ax.legend()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_ablation(curves: dict, path, title: str = "") -> Path:
    """EER against mask size, one line per label with standard-error bars."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, curve in curves.items():
        pts = np.array(curve.points, dtype=np.float64)
        ax.errorbar(pts[:, 0], pts[:, 1], yerr=pts[:, 2], marker="o", capsize=3, label=label)
    ax.set_xlabel("mask size (bins)" if "freq" in next(iter(curves.values())).axis
                  else "mask size (frames)")
    ax.set_ylabel("EER (%)")
    ax.set_title(title)
    ax.legend()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_training(metrics: list, path, evals: list | None = None) -> Path:
    """Loss and learning rate per step; toy EER on a second panel when present."""
    plt = _pyplot()
    panels = 3 if evals else 2
    fig, axes = plt.subplots(panels, 1, figsize=(6, 2.2 * panels), sharex=True)
    steps = [m["step"] for m in metrics]
    axes[0].plot(steps, [m["loss"] for m in metrics], lw=0.8)
    axes[0].set_ylabel("loss")
    axes[1].plot(steps, [m["lr"] for m in metrics], lw=0.8)
    axes[1].set_ylabel("learning rate")
    if evals:
        axes[2].plot([e["step"] for e in evals], [e["eer"] for e in evals], marker="o")
        axes[2].set_ylabel("EER (%)")
    axes[-1].set_xlabel("step")
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_scores(scores, labels, path, title: str = "") -> Path:
    """Target and non-target score histograms."""
    plt = _pyplot()
    scores, labels = np.asarray(scores), np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(scores.min(), scores.max(), 40) if np.ptp(scores) > 0 else 10
    ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="target")
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="non-target")
    ax.set_xlabel("score")
    ax.set_ylabel("trials")
    ax.set_title(title)
    ax.legend()
    out = _save(fig, path)
    plt.close(fig)
    return out
