"""Loss histogram of clean vs poisoned samples."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional

import numpy as np


def histogram_counts(losses: np.ndarray, flags: np.ndarray, bins: int = 50,
                     value_range: Optional[tuple] = None) -> Dict[str, np.ndarray]:
    losses = np.asarray(losses, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if losses.shape != flags.shape:
        raise ValueError("losses and flags must align")
    if value_range is None:
        value_range = (float(losses.min()), float(losses.max())) if len(losses) else (0.0, 1.0)
        if value_range[0] == value_range[1]:
            value_range = (value_range[0], value_range[0] + 1.0)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out = {"edges": edges, "clean": np.histogram(losses[~flags], edges)[0]}
    if flags.any():
        out["poison"] = np.histogram(losses[flags], edges)[0]
    return out


def plot_loss_histogram(losses: np.ndarray, flags: np.ndarray, path, bins: int = 50,
                        title: str = "per-sample loss") -> Dict[str, np.ndarray]:
    """Write a PNG with one bar series per group and return the binned counts."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = histogram_counts(losses, flags, bins)
    edges = counts["edges"]
    width = np.diff(edges)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(edges[:-1], counts["clean"], width=width, align="edge", alpha=0.6, label="clean", color="tab:blue")
    if "poison" in counts:
        ax.bar(edges[:-1], counts["poison"], width=width, align="edge", alpha=0.6, label="poison", color="tab:red")
    ax.set_xlabel("loss")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return counts
