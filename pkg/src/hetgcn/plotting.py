"""Static figures written next to the training log and evaluation CSV."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MISS_THRESHOLD_M  # noqa: E402


def plot_loss_curve(history: Sequence[dict], path: str | Path) -> Path:
    """Total loss and its three parts per epoch, log-scaled."""
    rows = [r for r in history if "epoch" in r]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("loss", "-"), ("goal", "--"), ("reg", "-."), ("score", ":")):
        values = [max(r[key], 1e-12) for r in rows]
        ax.plot(epochs, values, style, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_fde_histogram(fde: Sequence[float], path: str | Path, k: int) -> Path:
    """Histogram of per-scenario minFDE with the miss threshold marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(fde), bins=min(30, max(5, len(fde) // 2)), color="0.5", edgecolor="k")
    ax.axvline(MISS_THRESHOLD_M, color="r", linestyle="--", label=f"miss threshold {MISS_THRESHOLD_M:g} m")
    ax.set_xlabel(f"minFDE@{k} (m)")
    ax.set_ylabel("scenarios")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
