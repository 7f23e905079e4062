"""
Accuracy-versus-stage figures for finished orders
"""

import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)


def plot_sequence(result, path):
    """One line per task, from the stage that introduced it to the end of the order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stages = list(range(1, result.stages + 1))

    fig, ax = plt.subplots(figsize=(6, 4))
    for k, task in enumerate(result.order):
        ax.plot(stages[k:], result.task_accuracies(task), marker="o", label=task)
    ax.set_xlabel("Stage")
    ax.set_ylabel("Test accuracy (%)")
    ax.set_title(result.label.replace("->", " → "), fontsize=10)
    ax.set_xticks(stages)
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_all(results, out_dir):
    out_dir = Path(out_dir)
    paths = [plot_sequence(r, out_dir / f"{r.slug}.png") for r in results]
    logger.info(f"📈 {len(paths)} stage plots written to {out_dir}")
    return paths
