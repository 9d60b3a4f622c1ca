"""Raster figures (PNG) of t-SNE projections and confusion matrices.

Uses the object-oriented Agg API so nothing touches pyplot's global state.
PNG metadata is stripped so reruns give identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .analysis import Projection, confusion_shades, region_colors
from .evaluation import ConfusionMatrix

_METADATA = {"Software": None}


def _save(fig: Figure, path: str | Path, dpi: int) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=dpi, metadata=_METADATA)


def plot_projection(proj: Projection, path: str | Path, title: str = "", dpi: int = 100) -> None:
    colors = region_colors(proj.labels)
    labels = np.asarray(proj.labels)
    fig = Figure(figsize=(7.5, 6))
    ax = fig.add_subplot(1, 1, 1)
    for region, color in colors.items():
        sel = labels == region
        ax.scatter(proj.Y[sel, 0], proj.Y[sel, 1], s=8, c=color, label=region, linewidths=0)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    ax.legend(loc="center left", bbox_to_anchor=(1.0, 0.5), fontsize=8, frameon=False, markerscale=2)
    fig.subplots_adjust(left=0.03, right=0.8, top=0.93, bottom=0.03)
    _save(fig, path, dpi)


def plot_confusion(cm: ConfusionMatrix, path: str | Path, normalize: bool = True, title: str = "",
                   dpi: int = 100) -> None:
    shades = confusion_shades(cm, normalize)
    r = len(cm.regions)
    side = max(4.0, 0.45 * r + 1.5)
    fig = Figure(figsize=(side, side))
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(shades, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(r), cm.regions, rotation=90, fontsize=8)
    ax.set_yticks(range(r), cm.regions, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if r <= 20:
        for i in range(r):
            for j in range(r):
                txt = f"{shades[i, j]:.2f}" if normalize else str(int(cm.counts[i, j]))
                ax.text(j, i, txt, ha="center", va="center", fontsize=6,
                        color="white" if shades[i, j] > 0.5 else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path, dpi)
