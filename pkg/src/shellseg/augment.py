"""Training-time geometric and chromatic augmentation, plus the factory for
test-time augmentation (TTA) instances.

Geometric ops touch only positions (dropout removes whole points across all
arrays); chromatic ops touch only colors. Application order is fixed:
center shift, dropout, rotation, flips, jitter for geometry; auto-contrast,
translation, jitter, normalization for color. Composition order changes
results, so it is pinned rather than configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .sampling import as_rng


def _check_prob(name, v):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must be a probability, got {v}")


def _check_nonneg(name, v):
    if v < 0:
        raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class GeometricConfig:
    center_shift: bool = True
    dropout_p: float = 0.5
    dropout_ratio: float = 0.2
    rotate_z: bool = True
    rotate_xy_max: float = math.pi / 64
    flip_p: float = 0.5
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02

    def __post_init__(self):
        _check_prob("dropout_p", self.dropout_p)
        _check_prob("flip_p", self.flip_p)
        _check_prob("dropout_ratio", self.dropout_ratio)
        for name in ("rotate_xy_max", "jitter_sigma", "jitter_clip"):
            _check_nonneg(name, getattr(self, name))


@dataclass(frozen=True)
class ChromaticConfig:
    auto_contrast_p: float = 0.2
    translation_p: float = 0.95
    translation_ratio: float = 0.05
    jitter_p: float = 0.95
    jitter_sigma: float = 0.05 * 255.0
    normalize: bool = True

    def __post_init__(self):
        for name in ("auto_contrast_p", "translation_p", "jitter_p"):
            _check_prob(name, getattr(self, name))
        _check_nonneg("translation_ratio", self.translation_ratio)
        _check_nonneg("jitter_sigma", self.jitter_sigma)


@dataclass(frozen=True)
class AugmentConfig:
    geometric: GeometricConfig = field(default_factory=GeometricConfig)
    chromatic: ChromaticConfig = field(default_factory=ChromaticConfig)

    @classmethod
    def off(cls) -> "AugmentConfig":
        """A config under which both apply functions are the identity."""
        return cls(
            geometric=GeometricConfig(center_shift=False, dropout_p=0.0,
                                      rotate_z=False, rotate_xy_max=0.0,
                                      flip_p=0.0, jitter_sigma=0.0),
            chromatic=ChromaticConfig(auto_contrast_p=0.0, translation_p=0.0,
                                      jitter_p=0.0, normalize=False))


def _rot(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    R = np.eye(3)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    R[i, i] = c
    R[j, j] = c
    R[i, j] = s if axis == 1 else -s
    R[j, i] = -s if axis == 1 else s
    return R


def apply_geometric(pc: PointCloud, cfg: AugmentConfig, seed) -> PointCloud:
    """Center shift, dropout, rotation, flips, coordinate jitter, in that order."""
    if len(pc) == 0:
        raise ValueError("cannot augment an empty cloud")
    g = cfg.geometric
    rng = as_rng(seed)
    X = pc.positions.copy()

    if g.center_shift:
        shift = np.array([X[:, 0].mean(), X[:, 1].mean(), X[:, 2].min()])
        X = X - shift

    if g.dropout_p > 0 and rng.random() < g.dropout_p:
        n = len(X)
        n_keep = max(1, n - int(n * g.dropout_ratio))
        keep = np.sort(rng.choice(n, size=n_keep, replace=False))
        pc = pc.take(keep)
        X = X[keep]

    R = np.eye(3)
    if g.rotate_z:
        R = _rot(2, rng.uniform(-math.pi, math.pi)) @ R
    if g.rotate_xy_max > 0:
        R = _rot(0, rng.uniform(-g.rotate_xy_max, g.rotate_xy_max)) @ R
        R = _rot(1, rng.uniform(-g.rotate_xy_max, g.rotate_xy_max)) @ R
    if not np.array_equal(R, np.eye(3)):
        X = X @ R.T

    for axis in (0, 1):
        if g.flip_p > 0 and rng.random() < g.flip_p:
            X[:, axis] = -X[:, axis]

    if g.jitter_sigma > 0:
        noise = rng.normal(0.0, g.jitter_sigma, size=X.shape)
        X = X + np.clip(noise, -g.jitter_clip, g.jitter_clip)

    return pc.with_positions(X)


def apply_chromatic(pc: PointCloud, cfg: AugmentConfig, seed) -> PointCloud:
    """Auto-contrast, channel translation, color jitter, then 0-255 -> [-1, 1].

    Colors come back real-valued (feature scale); intermediate values are
    clamped to the 0-255 range after each additive op. Geometry untouched.
    """
    if pc.colors is None:
        raise ValueError("chromatic augmentation needs colors")
    c = cfg.chromatic
    rng = as_rng(seed)
    col = pc.colors.astype(np.float64)

    if c.auto_contrast_p > 0 and rng.random() < c.auto_contrast_p:
        blend = rng.random()
        lo = col.min(axis=0)
        hi = col.max(axis=0)
        scale = np.where(hi > lo, 255.0 / np.where(hi > lo, hi - lo, 1.0), 0.0)
        stretched = np.where(hi > lo, (col - lo) * scale, col)
        col = (1.0 - blend) * col + blend * stretched

    if c.translation_p > 0 and rng.random() < c.translation_p:
        shift = (rng.random(3) * 2.0 - 1.0) * c.translation_ratio * 255.0
        col = np.clip(col + shift, 0.0, 255.0)

    if c.jitter_p > 0 and rng.random() < c.jitter_p:
        col = np.clip(col + rng.normal(0.0, c.jitter_sigma, size=col.shape), 0.0, 255.0)

    if c.normalize:
        col = col / 127.5 - 1.0

    return pc.with_colors(col)


@dataclass(frozen=True)
class TtaConfig:
    """Yaw angles (radians) crossed with an optional x-mirror.

    Angle 0 must be present so the identity instance is always emitted.
    """

    yaw_angles: tuple[float, ...] = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
    mirror_x: bool = True

    def __post_init__(self):
        object.__setattr__(self, "yaw_angles", tuple(float(a) for a in self.yaw_angles))
        if not any(abs(a % (2 * math.pi)) < 1e-12
                   or abs(a % (2 * math.pi) - 2 * math.pi) < 1e-12
                   for a in self.yaw_angles):
            raise ValueError("yaw_angles must include 0 (the identity instance)")

    @property
    def n_instances(self) -> int:
        return len(self.yaw_angles) * (2 if self.mirror_x else 1)


def tta_instances(pc: PointCloud, cfg: TtaConfig) -> list[tuple[PointCloud, str]]:
    """One transformed copy per (mirror option x yaw angle), identity first.

    Every instance keeps the source point order and count, so per-point
    predictions can be voted back onto the original cloud positionally.
    The mirror (when active) is applied before the yaw rotation.
    """
    out = []
    for mirror in ((False, True) if cfg.mirror_x else (False,)):
        for a in cfg.yaw_angles:
            X = pc.positions.copy()
            if mirror:
                X[:, 0] = -X[:, 0]
            if a != 0.0:
                X = X @ _rot(2, a).T
            name = f"yaw{round(math.degrees(a)) % 360:03d}" + ("_mx" if mirror else "")
            out.append((pc.with_positions(X), name))
    return out
