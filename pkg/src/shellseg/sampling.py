"""Voxel-grid subsampling, sphere cropping, fragment partitioning, and
exact k-nearest-neighbor queries.

All operations are deterministic under a fixed seed. Neighbor ties are
broken by lower point index, which keeps results independent of the
backing spatial index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import _readonly


def as_rng(seed) -> np.random.Generator:
    """Pass generators (or generator look-alikes) through, seed everything else."""
    if hasattr(seed, "random") and hasattr(seed, "integers"):
        return seed
    return np.random.default_rng(seed)


def _positions_of(pc) -> np.ndarray:
    X = pc.positions if hasattr(pc, "positions") else np.asarray(pc, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("expected an (n, 3) coordinate array")
    return X


def voxel_ids(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Compact per-point voxel ids, numbered by lexicographic voxel-key order.

    The grid is anchored at the cloud minimum, so sampling is invariant to
    scene translation.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    X = _positions_of(positions)
    keys = np.floor((X - X.min(axis=0)) / voxel_size).astype(np.int64)
    _, ids = np.unique(keys, axis=0, return_inverse=True)
    return ids.reshape(-1).astype(np.int64)


@dataclass(frozen=True)
class SampleIndex:
    """Result of voxel subsampling.

    kept : indices of the surviving points, one per occupied voxel.
    inverse : for every source point, the position of its voxel's
        representative inside ``kept``.
    """

    kept: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kept", _readonly(np.asarray(self.kept, dtype=np.int64)))
        object.__setattr__(self, "inverse", _readonly(np.asarray(self.inverse, dtype=np.int64)))
        if len(np.unique(self.kept)) != len(self.kept):
            raise ValueError("kept indices must be unique")


@dataclass(frozen=True)
class Fragment:
    """One slice of a fragment partition: the points that drew ``rank``."""

    indices: np.ndarray
    rank: int

    def __post_init__(self):
        object.__setattr__(self, "indices", _readonly(np.asarray(self.indices, dtype=np.int64)))

    def __len__(self):
        return len(self.indices)


def _grouped_order(ids: np.ndarray, rng: np.random.Generator):
    """Order points by voxel id with a random shuffle inside each voxel."""
    r = rng.random(len(ids))
    order = np.lexsort((r, ids))
    return order, ids[order]


def voxel_grid_sample(pc, voxel_size: float, seed) -> SampleIndex:
    """Keep one uniformly random point per occupied voxel."""
    X = _positions_of(pc)
    ids = voxel_ids(X, voxel_size)
    order, ids_sorted = _grouped_order(ids, as_rng(seed))
    first = np.ones(len(ids), dtype=bool)
    first[1:] = ids_sorted[1:] != ids_sorted[:-1]
    kept = order[first]
    # groups come out in ascending compact-id order, so kept[v] represents
    # voxel v and the inverse map is the id array itself
    return SampleIndex(kept=kept, inverse=ids)


def sphere_crop(pc, max_points: int, seed) -> np.ndarray:
    """Indices (ascending) of the ``max_points`` points nearest a random center.

    The center is one of the cloud's own points, drawn uniformly. Clouds at
    or under the budget pass through unchanged.
    """
    if max_points <= 0:
        raise ValueError("max_points must be positive")
    X = _positions_of(pc)
    n = len(X)
    if n <= max_points:
        return np.arange(n, dtype=np.int64)
    rng = as_rng(seed)
    center = X[int(rng.integers(n))]
    d = np.linalg.norm(X - center, axis=1)
    nearest = np.argsort(d, kind="stable")[:max_points]
    return np.sort(nearest).astype(np.int64)


def fragment_partition(pc, voxel_size: float, seed) -> list[Fragment]:
    """Partition a cloud into voxel-disjoint fragments.

    Points inside each voxel draw a random rank permutation; fragment r
    collects every point of rank r. The fragment count equals the maximum
    voxel occupancy, fragments are disjoint, and together they cover every
    point, so dense regions are thinned without dropping anything.
    """
    X = _positions_of(pc)
    n = len(X)
    ids = voxel_ids(X, voxel_size)
    order, ids_sorted = _grouped_order(ids, as_rng(seed))
    boundaries = np.flatnonzero(np.diff(ids_sorted)) + 1
    starts = np.concatenate(([0], boundaries))
    counts = np.diff(np.concatenate((starts, [n])))
    rank_sorted = np.arange(n) - np.repeat(starts, counts)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = rank_sorted
    return [Fragment(indices=np.flatnonzero(rank == r), rank=r)
            for r in range(int(counts.max()))]


def knn(positions, queries=None, k: int = 1, include_self: bool = True) -> np.ndarray:
    """Exact k-nearest-neighbor indices, shape (n_queries, k).

    ``queries=None`` queries the cloud against itself; with
    ``include_self=False`` each point's own index is then excluded.
    Neighbors are ordered by (distance, index), so equidistant candidates
    resolve to the lower index.
    """
    X = np.ascontiguousarray(_positions_of(positions), dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("positions must be non-empty")
    self_mode = queries is None
    Q = X if self_mode else np.ascontiguousarray(_positions_of(queries), dtype=np.float64)
    exclude = self_mode and not include_self
    available = n - 1 if exclude else n
    if not 1 <= k <= available:
        raise ValueError(f"k={k} outside [1, {available}]")

    need = k + (1 if exclude else 0)
    window = min(n, need + 8)
    tree = cKDTree(X)
    _, idx = tree.query(Q, k=window)
    idx = np.atleast_2d(idx).reshape(len(Q), window)

    # recompute distances so ordering matches exhaustive evaluation exactly
    d = np.linalg.norm(X[idx] - Q[:, None, :], axis=2)
    by_index = np.argsort(idx, axis=1, kind="stable")
    d = np.take_along_axis(d, by_index, axis=1)
    idx = np.take_along_axis(idx, by_index, axis=1)
    by_dist = np.argsort(d, axis=1, kind="stable")
    d = np.take_along_axis(d, by_dist, axis=1)
    idx = np.take_along_axis(idx, by_dist, axis=1)

    if exclude:
        keep = idx != np.arange(len(Q))[:, None]
        sel = np.argsort(~keep, axis=1, kind="stable")[:, :k]
        out = np.take_along_axis(idx, sel, axis=1)
        boundary = np.take_along_axis(d, sel, axis=1)[:, -1]
    else:
        out = idx[:, :k]
        boundary = d[:, k - 1]

    if window < n:
        # a tie straddling the search window can hide a lower-index candidate;
        # fall back to exhaustive search for those queries
        risky = np.flatnonzero(boundary >= d[:, -1])
        for q in risky:
            dq = np.linalg.norm(X - Q[q], axis=1)
            order = np.argsort(dq, kind="stable")
            if exclude:
                order = order[order != q]
            out[q] = order[:k]
    return out.astype(np.int64)
