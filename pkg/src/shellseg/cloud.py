"""Point cloud container types, range filtering, and per-class dataset statistics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

# Highest index of the 16-bit label wire type; marks unlabeled points and is
# never a valid class index.
IGNORE_LABEL = 65535

SPLITS = ("train", "val", "test")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """One scan: positions in meters plus optional per-point attributes.

    All per-point arrays share the same length. ``labels`` holds class indices
    into a label space, with ``IGNORE_LABEL`` marking unlabeled points.
    ``colors`` are 0-255 uint8 triplets on raw clouds; chromatic transforms may
    replace them with real-valued feature triplets. Instance id 0 is valid; a
    cloud without instance annotation has ``instances is None``. Arrays are
    made read-only on construction, so clouds are safe to share across threads.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    instances: np.ndarray | None = None
    scene_id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("positions contain NaN or Inf")
        n = len(pos)
        object.__setattr__(self, "positions", _readonly(pos))

        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != (n, 3):
                raise ValueError(f"colors must be ({n}, 3), got {col.shape}")
            if np.issubdtype(col.dtype, np.integer):
                if col.min(initial=0) < 0 or col.max(initial=0) > 255:
                    raise ValueError("integer colors must lie in 0..255")
                col = col.astype(np.uint8)
            else:
                col = col.astype(np.float64)
            object.__setattr__(self, "colors", _readonly(col))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64)
            if inten.shape != (n,):
                raise ValueError(f"intensity must be ({n},), got {inten.shape}")
            object.__setattr__(self, "intensity", _readonly(inten))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (n,):
                raise ValueError(f"labels must be ({n},), got {lab.shape}")
            if n and (lab.min() < 0 or lab.max() > IGNORE_LABEL):
                raise ValueError("labels must lie in 0..IGNORE_LABEL")
            object.__setattr__(self, "labels", _readonly(lab))
        if self.instances is not None:
            inst = np.asarray(self.instances, dtype=np.int64)
            if inst.shape != (n,):
                raise ValueError(f"instances must be ({n},), got {inst.shape}")
            if n and inst.min() < 0:
                raise ValueError("instance ids must be non-negative")
            object.__setattr__(self, "instances", _readonly(inst))

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, idx) -> "PointCloud":
        """New cloud with every per-point array filtered by ``idx``."""
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(
            positions=self.positions[idx],
            colors=pick(self.colors),
            intensity=pick(self.intensity),
            labels=pick(self.labels),
            instances=pick(self.instances),
            scene_id=self.scene_id,
        )

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return replace(self, positions=positions)

    def with_colors(self, colors: np.ndarray) -> "PointCloud":
        return replace(self, colors=colors)

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return replace(self, labels=labels)


def validate_labels(pc: PointCloud, num_classes: int) -> None:
    """Check that every label is a valid index or the ignore sentinel."""
    if pc.labels is None:
        raise ValueError(f"scene {pc.scene_id!r} has no labels")
    bad = (pc.labels >= num_classes) & (pc.labels != IGNORE_LABEL)
    if bad.any():
        raise ValueError(
            f"scene {pc.scene_id!r}: {int(bad.sum())} labels outside "
            f"0..{num_classes - 1} and not the ignore sentinel"
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Scene list with train/val/test assignment.

    ``entries`` are (scene_id, relative path, split) rows; paths resolve
    against ``root``. Every scene appears exactly once, so the splits are
    disjoint by construction.
    """

    entries: tuple[tuple[str, str, str], ...]
    label_space: str
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(tuple(e) for e in self.entries))
        object.__setattr__(self, "root", Path(self.root))
        seen = set()
        for scene_id, _, split in self.entries:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r} for scene {scene_id!r}")
            if scene_id in seen:
                raise ValueError(f"scene {scene_id!r} assigned more than once")
            seen.add(scene_id)

    def __len__(self) -> int:
        return len(self.entries)

    def scenes(self, split: str | None = None) -> list[tuple[str, Path]]:
        """(scene_id, absolute path) pairs, optionally restricted to a split."""
        return [
            (sid, self.root / rel)
            for sid, rel, sp in self.entries
            if split is None or sp == split
        ]

    def subset(self, split: str) -> "DatasetManifest":
        rows = tuple(e for e in self.entries if e[2] == split)
        return DatasetManifest(rows, self.label_space, self.root)


@dataclass(frozen=True)
class ClassStats:
    """Per-class point/instance statistics over a manifest.

    ``point_share`` is the fraction of all points per class; its last entry is
    the ignore-sentinel share, so the vector sums to 1. Standard deviations use
    the population convention (divide by the scene count).
    """

    class_names: tuple[str, ...]
    points_mean: np.ndarray
    points_std: np.ndarray
    point_share: np.ndarray  # length C + 1, last entry = ignore share
    instances_mean: np.ndarray | None
    instances_std: np.ndarray | None
    n_scenes: int

    def share_of(self, names, space=None) -> float:
        idx = [self.class_names.index(n) for n in names]
        return float(self.point_share[idx].sum())

    def to_table(self) -> str:
        lines = ["class\tpoints_mean\tpoints_std\tinstances_mean\tinstances_std\tpoint_share"]
        for i, name in enumerate(self.class_names):
            im = "-" if self.instances_mean is None else repr(float(self.instances_mean[i]))
            is_ = "-" if self.instances_std is None else repr(float(self.instances_std[i]))
            lines.append(
                f"{name}\t{self.points_mean[i]!r}\t{self.points_std[i]!r}"
                f"\t{im}\t{is_}\t{self.point_share[i]!r}"
            )
        lines.append(f"__ignored__\t-\t-\t-\t-\t{self.point_share[-1]!r}")
        return "\n".join(lines) + "\n"


def distance_filter(pc: PointCloud, max_range: float) -> PointCloud:
    """Keep points within ``max_range`` meters of the coordinate origin."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    dist = np.linalg.norm(pc.positions, axis=1)
    return pc.take(np.flatnonzero(dist <= max_range))


def neighborhood_density(pc: PointCloud, k: int) -> tuple[float, float]:
    """Mean and population std over points of the mean k-nearest-neighbor distance.

    The point itself is excluded from its neighborhood.
    """
    n = len(pc)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n <= k:
        raise ValueError(f"need more than k={k} points, have {n}")
    tree = cKDTree(pc.positions)
    dist, _ = tree.query(pc.positions, k=k + 1)
    per_point = dist[:, 1:].mean(axis=1)  # column 0 is the zero self-distance
    return float(per_point.mean()), float(per_point.std())


def class_statistics(manifest: DatasetManifest, num_classes: int,
                     class_names=None, loader=None) -> ClassStats:
    """Aggregate per-scene class counts into mean/std and global point shares.

    Instance statistics are computed over the scenes that carry instance
    annotations and omitted when none do.
    """
    from . import io as _io

    load = loader if loader is not None else (lambda p: _io.load_pointcloud(p))
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    names = tuple(class_names) if class_names is not None else tuple(
        f"class_{i}" for i in range(num_classes))
    if len(names) != num_classes:
        raise ValueError("class_names length must equal num_classes")

    counts = []          # per scene: length C vectors
    ignored = []         # per scene: ignore-sentinel point count
    inst_counts = []     # per instance-carrying scene: length C vectors
    for scene_id, path in manifest.scenes():
        pc = load(path)
        if pc.labels is None:
            raise ValueError(f"scene {scene_id!r} has no labels")
        validate_labels(pc, num_classes)
        valid = pc.labels != IGNORE_LABEL
        counts.append(np.bincount(pc.labels[valid], minlength=num_classes))
        ignored.append(int((~valid).sum()))
        if pc.instances is not None:
            per_class = np.zeros(num_classes, dtype=np.int64)
            pairs = np.stack([pc.labels[valid], pc.instances[valid]], axis=1)
            for cls in np.unique(pairs[:, 0]):
                per_class[cls] = len(np.unique(pairs[pairs[:, 0] == cls, 1]))
            inst_counts.append(per_class)

    counts = np.array(counts, dtype=np.float64)
    total = counts.sum() + sum(ignored)
    if total == 0:
        raise ValueError("manifest contains no points")
    share = np.empty(num_classes + 1)
    share[:num_classes] = counts.sum(axis=0) / total
    share[num_classes] = sum(ignored) / total

    inst_mean = inst_std = None
    if inst_counts:
        inst = np.array(inst_counts, dtype=np.float64)
        inst_mean, inst_std = inst.mean(axis=0), inst.std(axis=0)
    return ClassStats(
        class_names=names,
        points_mean=counts.mean(axis=0),
        points_std=counts.std(axis=0),
        point_share=share,
        instances_mean=inst_mean,
        instances_std=inst_std,
        n_scenes=len(manifest),
    )
