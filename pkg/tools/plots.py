#!/usr/bin/env python3
"""Observed-vs-estimated scatter plots and training loss curves."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from head import TrainHistory  # noqa: E402
from records import SPLITS, TARGET_UNITS  # noqa: E402


def shared_limits(series: Mapping[str, tuple[np.ndarray, np.ndarray]], pad: float = 0.05) -> tuple[float, float]:
    values = np.concatenate([np.concatenate([np.ravel(y), np.ravel(yhat)]) for y, yhat in series.values()])
    low, high = float(np.min(values)), float(np.max(values))
    margin = (high - low) * pad if high > low else 1.0
    return low - margin, high + margin


def build_scatter_figure(series: Mapping[str, tuple[np.ndarray, np.ndarray]], target: str,
                         title: str = "") -> Figure:
    """One panel per split; both axes of every panel share one range."""
    splits = [split for split in SPLITS if split in series]
    limits = shared_limits({split: series[split] for split in splits})
    unit = TARGET_UNITS.get(target, "")
    fig, axes = plt.subplots(1, len(splits), figsize=(4 * len(splits), 4), squeeze=False,
                             constrained_layout=True)
    for ax, split in zip(axes[0], splits):
        y, yhat = series[split]
        ax.scatter(y, yhat, s=8, alpha=0.6)
        ax.plot(limits, limits, color="grey", linewidth=0.8)
        ax.set_xlim(limits)
        ax.set_ylim(limits)
        ax.set_aspect("equal")
        ax.set_title(f"{split} (n={len(y)})")
        ax.set_xlabel(f"observed {target} [{unit}]")
        ax.set_ylabel(f"estimated {target} [{unit}]")
    if title:
        fig.suptitle(title)
    return fig


def build_loss_figure(history: TrainHistory, title: str = "") -> Figure:
    """Train and validation loss per epoch; a dotted line marks the best epoch."""
    epochs = np.arange(1, len(history.train_loss) + 1)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    ax.plot(epochs, history.train_loss, label="train")
    ax.plot(epochs, history.val_loss, label="validation")
    ax.axvline(history.best_epoch, linestyle=":", color="black", label=f"best epoch {history.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE loss")
    ax.set_yscale("log")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    return fig


def save_figure(fig: Figure, path: Path, config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"Description": f"config_hash={config_hash}"} if config_hash else None
    fig.savefig(path, dpi=150, metadata=metadata)
    plt.close(fig)
    return path
