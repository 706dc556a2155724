"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import METRICS, MetricsReport
from .selection import MetricCurve, SelectionResult

RC = {"dpi": 100}
_PNG_META = {"Software": None}  # keep output bytes independent of the matplotlib build


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=RC["dpi"], metadata=_PNG_META)
    return path


def plot_curves(curves: Sequence[MetricCurve], path, selection: SelectionResult | None = None) -> Path:
    """Validation-task Dice (and training loss) per epoch for every budget."""
    fig = Figure(figsize=(8, 3.5))
    ax_d, ax_l = fig.subplots(1, 2)
    for c in sorted(curves, key=lambda c: -c.budget):
        (line,) = ax_d.plot(c.epochs, c.dice, marker=".", label=f"T={c.budget}")
        if c.loss is not None:
            ax_l.plot(c.epochs, c.loss, color=line.get_color(), label=f"T={c.budget}")
    if selection is not None:
        ax_d.plot([selection.epoch], [selection.dice], "k*", ms=12,
                  label=f"selected T={selection.budget}, epoch {selection.epoch}")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("validation-task Dice")
    ax_d.set_ylim(0, 1)
    ax_d.legend(fontsize=7)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_l.set_yscale("log")
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(report: MetricsReport, path, title: str = "") -> Path:
    """Per-case Dice/precision/recall as box plots with jittered points."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    data = [report.values(m) for m in METRICS]
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(METRICS) + 1), METRICS)
    rng = np.random.default_rng(0)
    for k, v in enumerate(data, start=1):
        ax.plot(k + rng.uniform(-0.12, 0.12, len(v)), v, "o", ms=3, alpha=0.6, color="k")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title or f"n={len(report.cases)}")
    fig.tight_layout()
    return _save(fig, path)


def plot_samples(samples, path, max_rows: int = 4) -> Path:
    """Central slice through each lesion: image, mixing weight and mask."""
    samples = list(samples)[:max_rows]
    fig = Figure(figsize=(7.5, 2.4 * max(len(samples), 1)))
    axes = np.atleast_2d(fig.subplots(max(len(samples), 1), 3))
    for row, s in zip(axes, samples):
        fg = np.argwhere(s.mask.data)
        z = int(np.rint(fg[:, 2].mean())) if fg.size else s.image.dims[2] // 2
        row[0].imshow(s.image.data[:, :, z].T, cmap="gray", origin="lower")
        row[0].set_title(f"{s.provenance.task}: {s.provenance.branch}", fontsize=8)
        if s.weight is not None:
            row[1].imshow(s.weight.data[:, :, z].T, cmap="magma", vmin=0, vmax=1, origin="lower")
            row[1].set_title("weight", fontsize=8)
        row[2].imshow(s.image.data[:, :, z].T, cmap="gray", origin="lower")
        row[2].contour(s.mask.data[:, :, z].T.astype(float), levels=[0.5], colors="r", linewidths=0.8)
        row[2].set_title("mask", fontsize=8)
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
