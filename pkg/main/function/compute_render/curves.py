"""Per-epoch loss curves as a PNG figure."""

import io
import logging
import math
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from function.io_utils import atomic_write_bytes  # noqa: E402

logger = logging.getLogger(__name__)


def plot_loss_curves(losses: Dict[str, Dict[str, List[float]]], out_path, title: str = "Training losses"):
    """One panel per stage, one line per loss term; empty stages are left out."""
    stages = [(stage, curves) for stage, curves in losses.items()
              if any(len(v) for v in curves.values())]
    if not stages:
        logger.warning("No loss history to plot")
        return None

    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 3.5), squeeze=False)
    for ax, (stage, curves) in zip(axes[0], stages):
        for name, values in curves.items():
            points = [(i + 1, v) for i, v in enumerate(values) if not math.isnan(v)]
            if points:
                xs, ys = zip(*points)
                ax.plot(xs, ys, marker="o", label=name)
        ax.set_title(f"stage {stage}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.suptitle(title)
    fig.tight_layout()

    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=100)
    plt.close(fig)
    path = atomic_write_bytes(out_path, buffer.getvalue())
    logger.info(f"Loss curves written to {path}")
    return path
