"""Deterministic synthetic shell-construction scenes.

Each scene is an axis-aligned room centered at the origin: floor and
ceiling planes, four walls with rectangular door/window openings (filled
by framed panels and topped by lintel beams), plus optional ceiling beams,
columns, box-step stairs, thin vertical installation strips, equipment
boxes, and none-labeled clutter. Surfaces are sampled on a jittered grid
with exact per-surface counts (round(area x density)), colors come from a
per-class palette plus Gaussian noise, and every draw is seeded, so equal
seeds give bit-identical clouds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as _io
from .cloud import DatasetManifest, PointCloud, SPLITS
from .labels import LabelSpace, get_label_space
from .sampling import as_rng

PALETTE = {
    "_none": (60, 60, 60),
    "ceiling": (235, 235, 225),
    "floor": (110, 75, 40),
    "wall": (205, 165, 125),
    "beam": (165, 35, 35),
    "column": (95, 95, 145),
    "window": (70, 130, 220),
    "door": (175, 115, 35),
    "stair": (90, 85, 185),
    "equipment": (45, 165, 75),
    "installation": (225, 205, 45),
}


def _check_range(name, r, lo_ok=0.0):
    if len(r) != 2 or r[0] > r[1] or r[0] < lo_ok:
        raise ValueError(f"{name} must be an ascending (lo, hi) range, got {r}")


@dataclass(frozen=True)
class SceneSpec:
    width_range: tuple[float, float] = (4.0, 6.0)
    depth_range: tuple[float, float] = (3.0, 5.0)
    height_range: tuple[float, float] = (2.5, 3.0)
    density: float = 400.0
    doors: tuple[int, int] = (1, 2)
    windows: tuple[int, int] = (1, 2)
    beams: tuple[int, int] = (0, 2)
    columns: tuple[int, int] = (0, 1)
    stairs: tuple[int, int] = (0, 1)
    installations: tuple[int, int] = (1, 2)
    equipment: tuple[int, int] = (1, 2)
    clutter: tuple[int, int] = (2, 4)
    color_noise: float = 8.0
    palette: dict = field(default_factory=lambda: dict(PALETTE))

    def __post_init__(self):
        for name in ("width_range", "depth_range", "height_range"):
            _check_range(name, getattr(self, name), lo_ok=1e-6)
        for name in ("doors", "windows", "beams", "columns", "stairs",
                     "installations", "equipment", "clutter"):
            _check_range(name, getattr(self, name))
        if self.density <= 0 or self.color_noise < 0:
            raise ValueError("density must be positive, color_noise non-negative")

    @classmethod
    def imbalanced(cls) -> "SceneSpec":
        """Preset whose wall+floor+ceiling share lands near 94.3% of points."""
        return cls(width_range=(5.0, 6.5), depth_range=(4.0, 5.5),
                   height_range=(2.6, 3.0),
                   doors=(1, 1), windows=(1, 1), beams=(0, 0), columns=(0, 0),
                   stairs=(0, 0), installations=(1, 1), equipment=(0, 0),
                   clutter=(1, 1))


@dataclass(frozen=True)
class Primitive:
    """One sampled rectangle: origin + s*u + t*v for s, t in [0, 1]."""

    origin: tuple[float, float, float]
    u: tuple[float, float, float]
    v: tuple[float, float, float]
    class_name: str
    instance: int

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.u) * np.linalg.norm(self.v))


def _rects_of_box(lo, hi, class_name, instance):
    """Six axis-aligned faces of the box [lo, hi]."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    faces = [
        ((x0, y0, z0), (dx, 0, 0), (0, dy, 0)),   # bottom
        ((x0, y0, z1), (dx, 0, 0), (0, dy, 0)),   # top
        ((x0, y0, z0), (dx, 0, 0), (0, 0, dz)),   # y0 side
        ((x0, y1, z0), (dx, 0, 0), (0, 0, dz)),   # y1 side
        ((x0, y0, z0), (0, dy, 0), (0, 0, dz)),   # x0 side
        ((x1, y0, z0), (0, dy, 0), (0, 0, dz)),   # x1 side
    ]
    return [Primitive(o, u, v, class_name, instance) for o, u, v in faces]


def _sample_rect(prim: Primitive, density: float, rng) -> np.ndarray:
    """Jittered-grid samples with exactly round(area x density) points."""
    lu = float(np.linalg.norm(prim.u))
    lv = float(np.linalg.norm(prim.v))
    n = int(round(prim.area * density))
    if n <= 0:
        return np.empty((0, 3))
    gu = max(1, math.ceil(math.sqrt(n * lu / max(lv, 1e-12))))
    gv = max(1, math.ceil(n / gu))
    aa, bb = np.meshgrid(np.arange(gu), np.arange(gv), indexing="ij")
    s = (aa.ravel() + rng.random(gu * gv)) / gu
    t = (bb.ravel() + rng.random(gu * gv)) / gv
    if gu * gv > n:
        pick = rng.permutation(gu * gv)[:n]
        s, t = s[pick], t[pick]
    o = np.asarray(prim.origin)
    return o + np.outer(s, prim.u) + np.outer(t, prim.v)


class _Wall:
    def __init__(self, origin, u, v, normal):
        self.origin = np.asarray(origin, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.normal = np.asarray(normal, dtype=float)
        self.length = float(np.linalg.norm(u))
        self.height = float(np.linalg.norm(v))
        self.openings: list[tuple[float, float, float, float]] = []

    def fits(self, s0, w) -> bool:
        if s0 < 0.25 or s0 + w > self.length - 0.25:
            return False
        return all(s0 + w + 0.1 <= a or s0 >= a + aw + 0.1
                   for a, _t, aw, _h in self.openings)

    def point(self, s, t) -> np.ndarray:
        return self.origin + (s / self.length) * self.u + (t / self.height) * self.v

    def rect(self, s0, t0, w, h, class_name, instance, offset=0.0) -> Primitive:
        o = self.point(s0, t0) + self.normal * offset
        return Primitive(tuple(o), tuple(self.u * (w / self.length)),
                         tuple(self.v * (h / self.height)), class_name, instance)


def _mask_openings(points, wall: _Wall):
    if not wall.openings or len(points) == 0:
        return points
    rel = points - wall.origin
    s = rel @ wall.u / wall.length
    t = rel @ wall.v / wall.height
    keep = np.ones(len(points), dtype=bool)
    for (s0, t0, w, h) in wall.openings:
        keep &= ~((s >= s0) & (s <= s0 + w) & (t >= t0) & (t <= t0 + h))
    return points[keep]


def _build_primitives(spec: SceneSpec, rng):
    """All scene primitives plus the wall structures used for masking."""
    W = rng.uniform(*spec.width_range)
    D = rng.uniform(*spec.depth_range)
    H = rng.uniform(*spec.height_range)
    hw, hd, hh = W / 2, D / 2, H / 2
    prims: list[Primitive] = []
    inst = 0

    def take():
        nonlocal inst
        inst += 1
        return inst - 1

    prims.append(Primitive((-hw, -hd, -hh), (W, 0, 0), (0, D, 0), "floor", take()))
    prims.append(Primitive((-hw, -hd, hh), (W, 0, 0), (0, D, 0), "ceiling", take()))

    walls = [
        _Wall((-hw, -hd, -hh), (0, D, 0), (0, 0, H), (1, 0, 0)),
        _Wall((hw, -hd, -hh), (0, D, 0), (0, 0, H), (-1, 0, 0)),
        _Wall((-hw, -hd, -hh), (W, 0, 0), (0, 0, H), (0, 1, 0)),
        _Wall((-hw, hd, -hh), (W, 0, 0), (0, 0, H), (0, -1, 0)),
    ]
    wall_instances = [take() for _ in walls]

    def place_opening(w, h, t0):
        for _ in range(20):
            wall = walls[int(rng.integers(len(walls)))]
            s0 = rng.uniform(0.25, max(0.26, wall.length - w - 0.25))
            if wall.fits(s0, w):
                wall.openings.append((s0, t0, w, h))
                return wall, s0
        return None, None

    fm = 0.06                                     # frame strip width

    def framed_filler(wall, s0, t0, w, h, cname, with_bottom):
        i = take()
        strips = [wall.rect(s0, t0 + (fm if with_bottom else 0), fm,
                            h - fm - (fm if with_bottom else 0), cname, i),
                  wall.rect(s0 + w - fm, t0 + (fm if with_bottom else 0), fm,
                            h - fm - (fm if with_bottom else 0), cname, i),
                  wall.rect(s0, t0 + h - fm, w, fm, cname, i)]
        if with_bottom:
            strips.append(wall.rect(s0, t0, w, fm, cname, i))
        panel = wall.rect(s0 + fm, t0 + (fm if with_bottom else 0),
                          w - 2 * fm, h - fm - (fm if with_bottom else 0),
                          cname, i, offset=0.04)
        return strips + [panel]

    def lintel(wall, s0, w, top):
        if top + 0.05 >= H:
            return []
        i = take()
        h = min(0.22, H - top)
        depth = 0.12
        o = wall.point(s0, top)
        u_dir = wall.u / wall.length
        lo_hi = np.stack([o, o + u_dir * w + wall.v / wall.height * h
                          + wall.normal * depth])
        lo = lo_hi.min(axis=0)
        hi = lo_hi.max(axis=0)
        return _rects_of_box(tuple(lo), tuple(hi), "beam", i)

    door_h = min(2.0, H - 0.3)
    n_doors = int(rng.integers(spec.doors[0], spec.doors[1] + 1))
    if n_doors and door_h < 0.5:
        raise ValueError("door opening taller than the wall allows")
    for _ in range(n_doors):
        w = rng.uniform(0.85, 1.0)
        wall, s0 = place_opening(w, door_h, 0.0)
        if wall is None:
            continue
        prims += framed_filler(wall, s0, 0.0, w, door_h, "door", with_bottom=False)
        prims += lintel(wall, s0, w, door_h)

    n_windows = int(rng.integers(spec.windows[0], spec.windows[1] + 1))
    for _ in range(n_windows):
        wh = min(rng.uniform(1.0, 1.4), H - 1.0)
        if wh < 0.3:
            continue
        w = rng.uniform(1.0, 1.5)
        wall, s0 = place_opening(w, wh, 0.9)
        if wall is None:
            continue
        prims += framed_filler(wall, s0, 0.9, w, wh, "window", with_bottom=True)
        prims += lintel(wall, s0, w, 0.9 + wh)

    for _ in range(int(rng.integers(spec.beams[0], spec.beams[1] + 1))):
        y = rng.uniform(-hd + 0.5, hd - 0.5)
        prims += _rects_of_box((-hw, y - 0.08, hh - 0.25), (hw, y + 0.08, hh),
                               "beam", take())

    for _ in range(int(rng.integers(spec.columns[0], spec.columns[1] + 1))):
        x = rng.uniform(-hw + 0.6, hw - 0.6)
        y = rng.uniform(-hd + 0.6, hd - 0.6)
        prims += _rects_of_box((x - 0.15, y - 0.15, -hh), (x + 0.15, y + 0.15, hh),
                               "column", take())

    for _ in range(int(rng.integers(spec.stairs[0], spec.stairs[1] + 1))):
        n_steps = int(rng.integers(4, 7))
        tread, rise, width = 0.28, 0.18, 1.0
        x0 = rng.uniform(-hw + 0.3, max(-hw + 0.31, hw - 0.3 - n_steps * tread))
        y0 = rng.uniform(-hd + 0.3, hd - 0.3 - width)
        i = take()
        for sidx in range(n_steps):
            prims += _rects_of_box(
                (x0 + sidx * tread, y0, -hh),
                (x0 + (sidx + 1) * tread, y0 + width, -hh + (sidx + 1) * rise),
                "stair", i)

    for _ in range(int(rng.integers(spec.installations[0], spec.installations[1] + 1))):
        wall = walls[int(rng.integers(len(walls)))]
        s0 = rng.uniform(0.3, wall.length - 0.36)
        z0 = rng.uniform(0.1, 0.5)
        h = rng.uniform(1.0, min(2.0, H - z0 - 0.1))
        base = wall.point(s0, z0)
        u_dir = wall.u / wall.length
        corner = np.stack([base, base + u_dir * 0.06 + wall.normal * 0.06
                           + np.array([0, 0, h])])
        prims += _rects_of_box(tuple(corner.min(axis=0)), tuple(corner.max(axis=0)),
                               "installation", take())

    for _ in range(int(rng.integers(spec.equipment[0], spec.equipment[1] + 1))):
        sx, sy, sz = rng.uniform(0.4, 0.7, size=3)
        x = rng.uniform(-hw + 0.8, hw - 0.8)
        y = rng.uniform(-hd + 0.8, hd - 0.8)
        prims += _rects_of_box((x - sx / 2, y - sy / 2, -hh),
                               (x + sx / 2, y + sy / 2, -hh + sz), "equipment", take())

    for _ in range(int(rng.integers(spec.clutter[0], spec.clutter[1] + 1))):
        sx, sy, sz = rng.uniform(0.1, 0.35, size=3)
        x = rng.uniform(-hw + 0.5, hw - 0.5)
        y = rng.uniform(-hd + 0.5, hd - 0.5)
        prims += _rects_of_box((x - sx / 2, y - sy / 2, -hh),
                               (x + sx / 2, y + sy / 2, -hh + sz), "_none", take())

    return prims, walls, wall_instances


def generate_scene(spec: SceneSpec, seed, label_space: LabelSpace | None = None,
                   scene_id: str | None = None, return_primitives: bool = False):
    """One labeled, instance-annotated room; bit-identical for equal seeds.

    The geometry depends only on (spec, seed): a different ``label_space``
    relabels the same points, which is what cross-space training fixtures
    rely on. Classes missing from the space collapse onto its none index.
    """
    space = label_space or get_label_space("shell11")
    rng = as_rng(seed)
    prims, walls, wall_instances = _build_primitives(spec, rng)

    chunks = []
    classes = []
    instances = []

    def emit(points, cname, instance):
        if len(points):
            chunks.append(points)
            classes.extend([cname] * len(points))
            instances.extend([instance] * len(points))

    for prim in prims[:2]:
        emit(_sample_rect(prim, spec.density, rng), prim.class_name, prim.instance)
    for wall, winst in zip(walls, wall_instances):
        wp = _sample_rect(Primitive(tuple(wall.origin), tuple(wall.u), tuple(wall.v),
                                    "wall", winst), spec.density, rng)
        emit(_mask_openings(wp, wall), "wall", winst)
    for prim in prims[2:]:
        emit(_sample_rect(prim, spec.density, rng), prim.class_name, prim.instance)

    X = np.concatenate(chunks, axis=0)
    name_arr = np.asarray(classes)
    inst_arr = np.asarray(instances, dtype=np.int64)

    none_idx = space.none_index
    lut = {}
    for cname in PALETTE:
        if cname in space.classes:
            lut[cname] = space.classes.index(cname)
        elif none_idx is not None:
            lut[cname] = none_idx
        else:
            raise ValueError(f"class {cname!r} has no slot in space {space.name!r}")
    labels = np.asarray([lut[c] for c in name_arr], dtype=np.int64)

    base = np.asarray([spec.palette[c] for c in name_arr], dtype=np.float64)
    colors = base + rng.normal(0.0, spec.color_noise, size=base.shape)
    colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)

    pc = PointCloud(positions=X, colors=colors, labels=labels, instances=inst_arr,
                    scene_id=scene_id or "synthetic")
    if return_primitives:
        wall_prims = [Primitive(tuple(w.origin), tuple(w.u), tuple(w.v), "wall", wi)
                      for w, wi in zip(walls, wall_instances)]
        return pc, prims[:2] + wall_prims + prims[2:]
    return pc


def split_sizes(n: int, fractions=(0.70, 0.15, 0.15)) -> list[int]:
    """Scene counts per split: minor splits round up once their quota
    reaches half a scene; the largest split absorbs the remainder."""
    fracs = [float(f) for f in fractions]
    if abs(sum(fracs) - 1.0) > 1e-9 or any(f < 0 for f in fracs):
        raise ValueError("split fractions must be non-negative and sum to 1")
    largest = fracs.index(max(fracs))
    sizes = [0] * len(fracs)
    for i, f in enumerate(fracs):
        if i == largest:
            continue
        q = n * f
        sizes[i] = math.ceil(q) if q >= 0.5 else 0
    overflow = sum(sizes) - n
    for i in range(len(sizes) - 1, -1, -1):
        if overflow <= 0:
            break
        if i != largest:
            cut = min(sizes[i], overflow)
            sizes[i] -= cut
            overflow -= cut
    sizes[largest] = n - sum(sizes)
    return sizes


def generate_dataset(spec: SceneSpec, n_scenes: int, out_dir,
                     split=(0.70, 0.15, 0.15), seed=0,
                     label_space: LabelSpace | None = None,
                     format: str = "columnar", prefix: str = "scene") -> DatasetManifest:
    """Write n labeled scenes plus a manifest with a seeded split assignment."""
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    space = label_space or get_label_space("shell11")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(n_scenes, split)
    rng = as_rng(seed)
    order = rng.permutation(n_scenes)
    assignment = np.empty(n_scenes, dtype=object)
    pos = 0
    for split_name, size in zip(SPLITS, sizes):
        assignment[order[pos:pos + size]] = split_name
        pos += size

    ext = {"columnar": ".pcc", "ply_ascii": ".ply", "ply_binary_le": ".ply"}[format]
    entries = []
    for i in range(n_scenes):
        sid = f"{prefix}_{i:03d}"
        pc = generate_scene(spec, seed=np.random.default_rng([seed, i]),
                            label_space=space, scene_id=sid)
        rel = sid + ext
        _io.save_pointcloud(pc, out_dir / rel, format=format)
        entries.append((sid, rel, str(assignment[i])))
    manifest = DatasetManifest(tuple(entries), space.name, out_dir)
    _io.save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
