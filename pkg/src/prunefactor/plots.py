"""Figure rendering for reports. All functions write a PNG and return its path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curves(stage_losses, path):
    """One line per stage of per-step training loss."""
    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for stage, losses in stage_losses.items():
        steps = np.arange(offset, offset + len(losses))
        ax.plot(steps, losses, label=stage, linewidth=0.9)
        offset += len(losses)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_lines(rows, x_key, y_key, group_key, path, xlabel="", ylabel="", hline=None):
    """Mean of y per (group, x) with per-seed points, one line per group."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = sorted({r[group_key] for r in rows}) if group_key else [None]
    for group in groups:
        sub = [r for r in rows if group_key is None or r[group_key] == group]
        xs = sorted({r[x_key] for r in sub})
        means = [np.mean([r[y_key] for r in sub if r[x_key] == x]) for x in xs]
        label = str(group) if group is not None else ylabel
        ax.plot(xs, means, marker="o", label=label)
        ax.scatter(
            [r[x_key] for r in sub], [r[y_key] for r in sub], s=10, alpha=0.35
        )
    if hline is not None:
        ax.axhline(hline, linestyle="--", color="gray", linewidth=1, label="dense")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_approximation(rows, path):
    """Relative truncation error and spectrum mass against rank k."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    names = sorted({r["matrix"] for r in rows})
    for name in names:
        sub = sorted((r for r in rows if r["matrix"] == name), key=lambda r: r["k"])
        ks = [r["k"] for r in sub]
        left.plot(ks, [r["relative_error"] for r in sub], marker="o", label=name)
        right.plot(ks, [r["cumulative_fraction"] for r in sub], marker="o", label=name)
    left.set_xlabel("rank k")
    left.set_ylabel("relative reconstruction error")
    right.set_xlabel("rank k")
    right.set_ylabel("cumulative singular-value fraction")
    left.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_mask(grid, path, title=""):
    """Black/white image of a 0/1 kept-entry grid (kept = white)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(grid, cmap="gray", interpolation="nearest", vmin=0, vmax=1)
    if title:
        ax.set_title(title)
    ax.set_xlabel("input index")
    ax.set_ylabel("output index")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
