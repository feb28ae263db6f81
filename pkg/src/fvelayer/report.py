"""Figure rendering for CLI outputs. Every figure lands next to the
delimited file it illustrates."""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .gmm import DiagGmm


def save_loglik_curve(path: str | Path, trace: np.ndarray, title: str = "Mean log-likelihood") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker=".", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("mean log-likelihood")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gmm_scatter(path: str | Path, data: np.ndarray, gmm: DiagGmm,
                     title: str = "Fitted mixture") -> None:
    """2-D data scatter with component means and 2-sigma extents."""
    if data.shape[1] != 2 or gmm.dim != 2:
        return
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(data[:, 0], data[:, 1], s=3, alpha=0.25, color="gray")
    sig = gmm.sigmas
    for k in range(gmm.k):
        ax.scatter(*gmm.means[k], color="crimson", marker="x", s=60)
        theta = np.linspace(0, 2 * np.pi, 100)
        ax.plot(gmm.means[k, 0] + 2 * sig[k, 0] * np.cos(theta),
                gmm.means[k, 1] + 2 * sig[k, 1] * np.sin(theta),
                color="crimson", lw=0.8)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(path: str | Path, metrics: list[dict]) -> None:
    steps = [m["step"] for m in metrics]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key in zip(axes, ("loss", "accuracy", "gmm_loglik")):
        ax.plot(steps, [m[key] for m in metrics], lw=1)
        ax.set_xlabel("step")
        ax.set_title(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_bars(path: str | Path, results: dict[str, float],
                       title: str = "Final test accuracy") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(results)
    ax.bar(names, [results[n] for n in names], color="steelblue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
