"""Figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so identical inputs give identical bytes
_META = {"Software": None}


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def loss_curve(losses, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, color="tab:blue", lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean noise-prediction MSE")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    _save(fig, path)


def metric_bars(rows: list[dict], path, keys=("dcd", "f1")) -> None:
    names = [r["pair"] for r in rows]
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys) + 1, 3.2), squeeze=False)
    for ax, key in zip(axes[0], keys):
        ax.bar(x, [r[key] for r in rows], color="tab:orange")
        ax.set_xticks(x, names, rotation=60, fontsize=7)
        ax.set_title(key)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def cloud_overlay(pred: np.ndarray, gt: np.ndarray, path, title: str = "") -> None:
    fig = plt.figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(*gt.T, s=2, c="0.6", label="target")
    ax.scatter(*pred.T, s=2, c="tab:red", label="prediction")
    ax.legend(loc="upper left", fontsize=7)
    ax.set_title(title, fontsize=9)
    _save(fig, path)
