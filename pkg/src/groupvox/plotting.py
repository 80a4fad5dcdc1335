"""Report figures. Uses the non-interactive Agg backend; every function writes a file."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(metrics: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [m["step"] for m in metrics]
    for key in ("loss_text", "loss_audio", "loss_total"):
        ax.plot(steps, [m[key] for m in metrics], label=key, linewidth=1)
    val = [(m["step"], m["val_loss"]) for m in metrics if "val_loss" in m]
    if val:
        ax.plot(*zip(*val), "o-", label="val_loss", markersize=3)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_latency(rows: Sequence[tuple[int, int, int]], path) -> Path:
    """``rows`` are (chunk, G, steps) triples; one line per chunk size."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for chunk in sorted({r[0] for r in rows}):
        pts = sorted((g, s) for c, g, s in rows if c == chunk)
        ax.plot(*zip(*pts), "o-", label=f"chunk={chunk}")
        for g, s in pts:
            ax.annotate(str(s), (g, s), textcoords="offset points", xytext=(0, 5), ha="center", fontsize=8)
    ax.set_xlabel("group size G")
    ax.set_ylabel("steps to first packet")
    ax.set_xticks(sorted({r[1] for r in rows}))
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_scores(scores: dict[str, float], path, overall: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 1 + 0.8 * len(scores)), 3.5))
    names = list(scores)
    ax.bar(names, [scores[n] for n in names], color="tab:blue")
    if overall is not None:
        ax.axhline(overall, color="tab:red", linestyle="--", label=f"overall {overall:.1f}")
        ax.legend(fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("score")
    return _save(fig, path)
