"""Figures written next to the CSV reports. Always renders off-screen."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_param_scaling(sizes: Sequence[int], series: dict[str, Sequence[int]], path: str | Path) -> Path:
    """Parameter count against square input size, one line per model."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, counts in series.items():
        ax.plot(sizes, np.asarray(counts) / 1e6, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xticks(list(sizes))
    ax.set_xticklabels([f"{s}x{s}" for s in sizes])
    ax.set_xlabel("input size")
    ax.set_ylabel("parameters (millions)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[dict], path: str | Path) -> Path:
    """Loss and accuracy per epoch from metrics rows (dicts with CSV field names)."""
    epochs = [int(r["epoch"]) for r in rows]
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
    left.plot(epochs, [float(r["train_loss"]) for r in rows], marker=".")
    left.set_xlabel("epoch")
    left.set_ylabel("train loss")
    right.plot(epochs, [float(r["train_acc"]) for r in rows], marker=".", label="train")
    right.plot(epochs, [float(r["val_acc"]) for r in rows], marker=".", label="validation")
    right.set_xlabel("epoch")
    right.set_ylabel("accuracy")
    right.set_ylim(0, 1)
    right.legend()
    for ax in (left, right):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_spectrogram(values: np.ndarray, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    im = ax.imshow(values, origin="lower", aspect="auto", cmap="magma", vmin=0, vmax=1)
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
