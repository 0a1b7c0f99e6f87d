"""Spherical panorama rendering and class-statistics charts.

The panorama is an equirectangular projection from the origin (the scanner
position): azimuth maps left-to-right across [-pi, pi), elevation maps
top-down, the nearest point wins each pixel, and pixels that receive no
point stay yellow.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .cloud import ClassStats, PointCloud
from .labels import LabelSpace
from .synth import PALETTE

EMPTY_COLOR = (255, 255, 0)


def class_palette(space: LabelSpace, palette: dict | None = None) -> np.ndarray:
    """(C, 3) uint8 palette for a label space; unknown names render gray."""
    palette = palette or PALETTE
    rows = [palette.get(name, (128, 128, 128)) for name in space.classes]
    return np.asarray(rows, dtype=np.uint8)


def render_panorama(pc: PointCloud, width: int = 1024, height: int = 512,
                    mode: str = "rgb", max_range: float = 25.0,
                    palette: np.ndarray | None = None) -> np.ndarray:
    """Equirectangular projection to an (height, width, 3) uint8 image.

    mode "rgb" uses point colors, "class" colors by label through
    ``palette``. Depth ties resolve to the lower point index.
    """
    if len(pc) == 0:
        raise ValueError("cannot render an empty cloud")
    if mode not in ("rgb", "class"):
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "class":
        if pc.labels is None:
            raise ValueError("class rendering needs labels")
        if palette is None:
            raise ValueError("class rendering needs a palette")
        colors = palette[pc.labels]
    else:
        if pc.colors is None:
            raise ValueError("rgb rendering needs colors")
        col = pc.colors
        if not np.issubdtype(col.dtype, np.integer):
            col = np.clip((col + 1.0) * 127.5, 0, 255)
        colors = col.astype(np.uint8)

    X = pc.positions
    r = np.linalg.norm(X, axis=1)
    keep = (r > 1e-12) & (r <= max_range)
    canvas = np.empty((height, width, 3), dtype=np.uint8)
    canvas[:] = EMPTY_COLOR
    if not keep.any():
        warnings.warn("no points within range; panorama is empty", stacklevel=2)
        return canvas
    X = X[keep]
    r = r[keep]
    colors = colors[keep]

    az = np.arctan2(X[:, 1], X[:, 0])
    el = np.arcsin(np.clip(X[:, 2] / r, -1.0, 1.0))
    px = np.floor((az + np.pi) / (2 * np.pi) * width).astype(np.int64) % width
    py = np.clip(np.floor((np.pi / 2 - el) / np.pi * height).astype(np.int64),
                 0, height - 1)

    # write far-to-near so the nearest point lands last; among equal depths
    # the lowest index is written last and wins
    order = np.lexsort((-np.arange(len(r)), -r))
    canvas[py[order], px[order]] = colors[order]
    return canvas


def save_png(image: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")
    return path


def class_stats_chart(stats: ClassStats, path) -> Path:
    """Log-scale bar chart of mean points (and instances) per class."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    present = [i for i, m in enumerate(stats.points_mean) if m > 0]
    names = [stats.class_names[i] for i in present]
    pts_mean = np.asarray([stats.points_mean[i] for i in present])
    pts_std = np.asarray([stats.points_std[i] for i in present])

    two_panel = stats.instances_mean is not None
    fig, axes = plt.subplots(1, 2 if two_panel else 1,
                             figsize=(10 if two_panel else 6, 4), squeeze=False)
    ax = axes[0][0]
    x = np.arange(len(present))
    ax.bar(x, pts_mean, yerr=pts_std, color="#4878a8", capsize=3)
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right")
    ax.set_ylabel("points per scene (mean)")
    if two_panel:
        inst_mean = np.asarray([stats.instances_mean[i] for i in present])
        inst_std = np.asarray([stats.instances_std[i] for i in present])
        shown = inst_mean > 0
        ax2 = axes[0][1]
        ax2.bar(x[shown], inst_mean[shown], yerr=inst_std[shown],
                color="#a85448", capsize=3)
        ax2.set_yscale("log")
        ax2.set_xticks(x[shown])
        ax2.set_xticklabels([n for n, s in zip(names, shown) if s],
                            rotation=60, ha="right")
        ax2.set_ylabel("instances per scene (mean)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
