"""Class taxonomies, class-occurrence overlap across datasets, and the
translation layer that aligns labels from one dataset's space to another's.

A label space is an ordered list of class names; some indices are flagged
as none-type (catch-all) classes. Translation maps every source class to a
same-named (or aliased) target class when one exists and to the target's
lowest none-type index otherwise; target indices that only receive such
fallback assignments are excluded from metric computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import IGNORE_LABEL

SHELL_CLASSES = ("_none", "ceiling", "floor", "wall", "beam", "column",
                 "window", "door", "stair", "equipment", "installation")

# singular/plural and catch-all synonym drift across dataset conventions
DEFAULT_ALIASES = {
    "stairs": "stair",
    "staircase": "stair",
    "clutter": "_none",
    "_clutter": "_none",
    "otherfurniture": "_none",
    "_otherfurniture": "_none",
    "other": "_none",
    "_other": "_none",
    "_misc": "_none",
    "slab": "floor",
    "bearing_wall": "wall",
    "partition_wall": "wall",
    "bookshelf": "bookcase",
}


def canonical(name: str, aliases: dict[str, str] | None = None) -> str:
    """Resolve a class name through the alias table, rejecting cycles."""
    if aliases is None:
        aliases = DEFAULT_ALIASES
    seen = {name}
    while name in aliases:
        name = aliases[name]
        if name in seen:
            raise ValueError(f"alias cycle through {name!r}")
        seen.add(name)
    return name


@dataclass(frozen=True)
class LabelSpace:
    """An ordered class taxonomy with designated none-type indices."""

    name: str
    classes: tuple[str, ...]
    none_indices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "none_indices", frozenset(self.none_indices))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in space {self.name!r}")
        if not self.classes:
            raise ValueError("label space needs at least one class")
        for i in self.none_indices:
            if not 0 <= i < len(self.classes):
                raise ValueError(f"none index {i} out of range")

    def __len__(self):
        return len(self.classes)

    @property
    def none_index(self) -> int | None:
        """Lowest none-type index, or None when the space has no catch-all."""
        return min(self.none_indices) if self.none_indices else None

    def index_of(self, class_name: str) -> int:
        return self.classes.index(class_name)


@dataclass(frozen=True)
class TranslationMap:
    """Per-index source-to-target mapping plus metric exclusions."""

    source: str
    target: str
    mapping: tuple[int, ...]
    excluded: frozenset[int]
    source_classes: tuple[str, ...] = ()
    target_classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(i) for i in self.mapping))
        object.__setattr__(self, "excluded", frozenset(int(i) for i in self.excluded))

    def to_table(self) -> str:
        """Two-column audit listing: source class, target class it lands on."""
        lines = []
        for i, j in enumerate(self.mapping):
            src = self.source_classes[i] if self.source_classes else str(i)
            dst = self.target_classes[j] if self.target_classes else str(j)
            mark = "\t[excluded]" if j in self.excluded else ""
            lines.append(f"{src}\t{dst}{mark}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class OverlapMatrix:
    """Occurrence of canonical class names (rows) across spaces (columns)."""

    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        if cells.shape != (len(self.rows), len(self.columns)):
            raise ValueError("cell grid shape does not match rows x columns")

    def occurrence(self, class_name: str, space_name: str) -> int:
        return int(self.cells[self.rows.index(class_name), self.columns.index(space_name)])

    def to_table(self) -> str:
        lines = ["class\t" + "\t".join(self.columns)]
        for r, row in enumerate(self.rows):
            lines.append(row + "\t" + "\t".join(str(int(v)) for v in self.cells[r]))
        return "\n".join(lines) + "\n"


def overlap_matrix(spaces, aliases: dict[str, str] | None = None) -> OverlapMatrix:
    """One-hot table of which canonical class occurs in which space."""
    names = set()
    canon_per_space = []
    for sp in spaces:
        canon = {canonical(c, aliases) for c in sp.classes}
        canon_per_space.append(canon)
        names |= canon
    rows = tuple(sorted(names))
    cells = np.zeros((len(rows), len(spaces)), dtype=np.int64)
    for j, canon in enumerate(canon_per_space):
        for i, name in enumerate(rows):
            cells[i, j] = 1 if name in canon else 0
    return OverlapMatrix(rows=rows, columns=tuple(sp.name for sp in spaces), cells=cells)


def build_translation(source: LabelSpace, target: LabelSpace,
                      aliases: dict[str, str] | None = None) -> TranslationMap:
    """Map each source class to its target counterpart or the none fallback.

    Matching is by alias-canonicalized name. Source classes without a
    counterpart land on the target's lowest none-type index, and that index
    becomes excluded from metrics.
    """
    target_canon: dict[str, int] = {}
    for j, cname in enumerate(target.classes):
        target_canon.setdefault(canonical(cname, aliases), j)
    mapping = []
    excluded = set()
    for sname in source.classes:
        key = canonical(sname, aliases)
        if key in target_canon:
            mapping.append(target_canon[key])
        else:
            if target.none_index is None:
                raise ValueError(
                    f"source class {sname!r} has no match in {target.name!r} "
                    "and the target has no none-type class to absorb it")
            mapping.append(target.none_index)
            excluded.add(target.none_index)
    return TranslationMap(source=source.name, target=target.name,
                          mapping=tuple(mapping), excluded=frozenset(excluded),
                          source_classes=source.classes, target_classes=target.classes)


def translate_labels(labels: np.ndarray, tmap: TranslationMap) -> np.ndarray:
    """Elementwise mapping application; the ignore sentinel passes through."""
    labels = np.asarray(labels, dtype=np.int64)
    real = labels != IGNORE_LABEL
    if real.any():
        bad = labels[real]
        if bad.min() < 0 or bad.max() >= len(tmap.mapping):
            raise ValueError("label outside the source space")
    lut = np.asarray(tmap.mapping, dtype=np.int64)
    out = np.full_like(labels, IGNORE_LABEL)
    out[real] = lut[labels[real]]
    return out


# ---------------------------------------------------------------------------
# Built-in spaces: the 11-class shell taxonomy plus illustrative spaces with
# the class counts of common indoor datasets, so cross-domain workflows run
# without any dataset downloads.

def _space(name, classes, extra_none=()):
    none = {i for i, c in enumerate(classes) if c.startswith("_")}
    none |= {classes.index(c) for c in extra_none}
    return LabelSpace(name=name, classes=tuple(classes), none_indices=frozenset(none))


BUILTIN_SPACES = {
    sp.name: sp for sp in [
        _space("shell11", SHELL_CLASSES),
        _space("pretrain8", ("_misc", "floor", "ceiling", "wall",
                             "column", "beam", "door", "window")),
        _space("s3dis13", ("ceiling", "floor", "wall", "beam", "column", "window",
                           "door", "table", "chair", "sofa", "bookcase", "board",
                           "_clutter")),
        _space("scannet20", ("wall", "floor", "cabinet", "bed", "chair", "sofa",
                             "table", "door", "window", "bookshelf", "picture",
                             "counter", "desk", "curtain", "refrigerator",
                             "shower_curtain", "toilet", "sink", "bathtub",
                             "_otherfurniture")),
        _space("structured3d25", ("wall", "floor", "cabinet", "bed", "chair",
                                  "sofa", "table", "door", "window", "bookshelf",
                                  "picture", "counter", "blinds", "desk", "shelves",
                                  "curtain", "dresser", "pillow", "mirror",
                                  "ceiling", "refrigerator", "television",
                                  "nightstand", "sink", "_other")),
        _space("vasad10", ("_none", "bearing_wall", "partition_wall", "slab",
                           "ceiling", "beam", "column", "door", "window", "stair")),
    ]
}


def get_label_space(name: str) -> LabelSpace:
    try:
        return BUILTIN_SPACES[name]
    except KeyError:
        raise KeyError(f"unknown label space {name!r}; "
                       f"built-ins: {sorted(BUILTIN_SPACES)}") from None


# ---------------------------------------------------------------------------
# Plain-text definition files

def save_label_space(space: LabelSpace, path) -> None:
    lines = [f"# label space {space.name}"]
    for i, cname in enumerate(space.classes):
        flag = "\t!none" if (i in space.none_indices and not cname.startswith("_")) else ""
        lines.append(cname + flag)
    Path(path).write_text("\n".join(lines) + "\n")


def load_label_space(path, name: str | None = None) -> LabelSpace:
    """Read a definition file: one class per line, optional ``!none`` flag.

    Names starting with an underscore are none-type implicitly.
    """
    path = Path(path)
    classes = []
    none = set()
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        cname = fields[0]
        if cname.startswith("_") or "!none" in fields[1:]:
            none.add(len(classes))
        classes.append(cname)
    return LabelSpace(name=name or path.stem, classes=tuple(classes),
                      none_indices=frozenset(none))


def save_aliases(aliases: dict[str, str], path) -> None:
    lines = [f"{k}\t{v}" for k, v in sorted(aliases.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_aliases(path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ValueError(f"bad alias line {raw!r}")
        out[fields[0]] = fields[1]
    return out
