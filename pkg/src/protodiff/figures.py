"""Matplotlib figure rendering for report outputs.

Every report path that writes a CSV also renders a figure next to it.
Headless (Agg) backend; files only, no interactive windows.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curve(history: list[float], path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(history) + 1), history, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_emergence(trace, path, which: str = "auto", top_k: int = 8) -> None:
    """Per-prototype trajectories over the recorded timesteps; the k most
    moving prototypes get labeled lines, the rest are drawn faint."""
    mat = trace.deltas if (which in ("auto", "delta") and trace.deltas is not None) \
        else trace.scores
    label = "delta s" if (trace.deltas is not None and which != "scores") else "s"
    t = np.asarray(trace.timesteps)
    movement = np.abs(mat - mat[:, :1]).max(axis=1)
    top = np.argsort(movement)[::-1][:top_k]
    fig, ax = plt.subplots(figsize=(7, 4))
    for j in range(mat.shape[0]):
        if j in top:
            ax.plot(t, mat[j], lw=1.5, label=f"p{j}")
        else:
            ax.plot(t, mat[j], lw=0.5, color="grey", alpha=0.4)
    ax.invert_xaxis()  # generation runs T -> 0
    ax.set_xlabel("timestep (generation order)")
    ax.set_ylabel(label)
    ax.legend(fontsize=7, ncol=2)
    ax.set_title("prototype emergence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(reports: list, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r.name for r in reports]
    values = [r.value for r in reports]
    errs = [r.dispersion for r in reports]
    ax.bar(names, values, yerr=errs, capsize=4, color="#4878a8")
    ax.set_ylabel("value")
    ax.set_title("evaluation metrics")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep_response(values, probe_means, path, source: str = "",
                        target: str = "", threshold: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(values, probe_means, marker="o")
    ax.set_xlabel(f"override value ({source})")
    ax.set_ylabel(f"probe P({target})")
    ax.set_ylim(-0.02, 1.02)
    if threshold is not None:
        swing = abs(probe_means[-1] - probe_means[0])
        ax.set_title(f"sweep response: swing {swing:.2f} "
                     f"({'>=':s} {threshold:.2f} flags)" if swing >= threshold
                     else f"sweep response: swing {swing:.2f} (< {threshold:.2f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cosine_histograms(before: list[int], after: list[int], path) -> None:
    edges = np.linspace(0, 1, len(before) + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(centers - width * 0.2, before, width=width * 0.38, label="before")
    ax.bar(centers + width * 0.2, after, width=width * 0.38, label="after")
    ax.set_xlabel("|cosine| between prototype pairs")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title("prototype pairwise cosine, before/after fine-tune")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
