"""Scan file I/O: PLY (ASCII / binary little-endian), a lossless columnar
format, and plain-text dataset manifests.

PLY carries x,y,z as float32 plus optional uchar RGB, float32 intensity,
ushort label, and uint32 instance properties. The columnar format stores
float64 coordinates and intensity, so intensity and instance ids round-trip
without loss. Parse failures report the byte offset at which the offending
data begins.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cloud import DatasetManifest, PointCloud

FORMATS = ("ply_ascii", "ply_binary_le", "columnar")

_COLUMNAR_MAGIC = b"PCCOL\x00"
_COLUMNAR_VERSION = 1
# field name -> (dtype code, numpy dtype)
_COLUMNAR_DTYPES = {1: "<f8", 2: "u1", 3: "<u2", 4: "<u4"}
_COLUMNAR_FIELDS = {
    "x": 1, "y": 1, "z": 1,
    "red": 2, "green": 2, "blue": 2,
    "intensity": 1,
    "label": 3,
    "instance": 4,
}

_PLY_PROPS = [
    # (name, ply type, numpy dtype)
    ("x", "float", "<f4"), ("y", "float", "<f4"), ("z", "float", "<f4"),
    ("red", "uchar", "u1"), ("green", "uchar", "u1"), ("blue", "uchar", "u1"),
    ("intensity", "float", "<f4"),
    ("label", "ushort", "<u2"),
    ("instance", "uint", "<u4"),
]


class FormatError(ValueError):
    """Malformed or truncated scan file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _check_labels_fit(pc: PointCloud):
    if pc.labels is not None and len(pc) and pc.labels.max() > 65535:
        raise ValueError("labels exceed the 16-bit wire type")
    if pc.instances is not None and len(pc) and pc.instances.max() > 0xFFFFFFFF:
        raise ValueError("instance ids exceed the 32-bit wire type")


def _present_props(pc: PointCloud):
    props = ["x", "y", "z"]
    if pc.colors is not None:
        if not np.issubdtype(pc.colors.dtype, np.integer):
            raise ValueError("cannot serialize real-valued feature colors; "
                             "only raw 0-255 colors are storable")
        props += ["red", "green", "blue"]
    if pc.intensity is not None:
        props.append("intensity")
    if pc.labels is not None:
        props.append("label")
    if pc.instances is not None:
        props.append("instance")
    return props


def _column(pc: PointCloud, name: str) -> np.ndarray:
    if name == "x":
        return pc.positions[:, 0]
    if name == "y":
        return pc.positions[:, 1]
    if name == "z":
        return pc.positions[:, 2]
    if name in ("red", "green", "blue"):
        return pc.colors[:, ("red", "green", "blue").index(name)]
    if name == "intensity":
        return pc.intensity
    if name == "label":
        return pc.labels
    if name == "instance":
        return pc.instances
    raise KeyError(name)


def _assemble(columns: dict[str, np.ndarray], scene_id: str) -> PointCloud:
    colors = None
    if "red" in columns:
        colors = np.stack([columns["red"], columns["green"], columns["blue"]], axis=1)
    return PointCloud(
        positions=np.stack([columns["x"], columns["y"], columns["z"]], axis=1),
        colors=colors,
        intensity=columns.get("intensity"),
        labels=None if "label" not in columns else columns["label"].astype(np.int64),
        instances=None if "instance" not in columns else columns["instance"].astype(np.int64),
        scene_id=scene_id,
    )


# ---------------------------------------------------------------------------
# PLY

def _ply_header(pc: PointCloud, binary: bool) -> tuple[bytes, list]:
    props = _present_props(pc)
    spec = [p for p in _PLY_PROPS if p[0] in props]
    lines = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"comment scene_id {pc.scene_id}" if pc.scene_id else "comment scene_id",
        f"element vertex {len(pc)}",
    ]
    lines += [f"property {t} {name}" for name, t, _ in spec]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii"), spec


def _format_f32(v: float) -> str:
    # 9 significant digits round-trip a float32 exactly
    return format(np.float32(v), ".9g")


def _save_ply(pc: PointCloud, path: Path, binary: bool):
    header, spec = _ply_header(pc, binary)
    n = len(pc)
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            rec = np.empty(n, dtype=[(name, dt) for name, _, dt in spec])
            for name, _, _ in spec:
                rec[name] = _column(pc, name)
            fh.write(rec.tobytes())
        else:
            cols = []
            for name, t, _ in spec:
                col = _column(pc, name)
                if t == "float":
                    cols.append([_format_f32(v) for v in col])
                else:
                    cols.append([str(int(v)) for v in col])
            rows = ("\n".join(" ".join(vals) for vals in zip(*cols)) + "\n") if n else ""
            fh.write(rows.encode("ascii"))


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply\n"):
        raise FormatError("not a PLY file", 0)
    end = data.find(b"end_header\n")
    if end < 0:
        raise FormatError("missing end_header", len(data))
    header_len = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")

    binary = None
    n = None
    spec = []
    scene_id = None
    offset = 0
    for line in lines:
        fields = line.split()
        if not fields:
            offset += len(line) + 1
            continue
        if fields[0] == "format":
            if fields[1] == "ascii":
                binary = False
            elif fields[1] == "binary_little_endian":
                binary = True
            else:
                raise FormatError(f"unsupported PLY format {fields[1]!r}", offset)
        elif fields[0] == "comment" and len(fields) >= 2 and fields[1] == "scene_id":
            scene_id = fields[2] if len(fields) > 2 else ""
        elif fields[0] == "element":
            if fields[1] != "vertex":
                raise FormatError(f"unsupported element {fields[1]!r}", offset)
            try:
                n = int(fields[2])
            except (IndexError, ValueError):
                raise FormatError("bad element vertex count", offset) from None
        elif fields[0] == "property":
            if len(fields) != 3:
                raise FormatError("bad property line", offset)
            ptype, name = fields[1], fields[2]
            known = {p[0]: p for p in _PLY_PROPS}
            if name not in known or known[name][1] != ptype:
                raise FormatError(f"unsupported property {ptype} {name}", offset)
            spec.append(known[name])
        offset += len(line) + 1
    if binary is None:
        raise FormatError("missing format line", header_len)
    if n is None:
        raise FormatError("missing element vertex line", header_len)
    for req in ("x", "y", "z"):
        if req not in [s[0] for s in spec]:
            raise FormatError(f"missing coordinate property {req!r}", header_len)
    return binary, n, spec, scene_id, header_len


def _load_ply(data: bytes, default_scene_id: str) -> PointCloud:
    binary, n, spec, scene_id, off = _parse_ply_header(data)
    if scene_id is None:
        scene_id = default_scene_id
    columns: dict[str, np.ndarray] = {}
    if binary:
        dtype = np.dtype([(name, dt) for name, _, dt in spec])
        need = n * dtype.itemsize
        if len(data) - off < need:
            complete = (len(data) - off) // dtype.itemsize
            raise FormatError(
                f"payload truncated: {complete} of {n} vertices present",
                off + complete * dtype.itemsize)
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        for name, _, _ in spec:
            columns[name] = rec[name]
    else:
        body = data[off:]
        pos = 0
        rows = [[] for _ in spec]
        for i in range(n):
            nl = body.find(b"\n", pos)
            line = body[pos:nl] if nl >= 0 else body[pos:]
            fields = line.split()
            if len(fields) != len(spec):
                raise FormatError(
                    f"vertex row {i}: expected {len(spec)} columns, got {len(fields)}",
                    off + pos)
            for j, ((name, t, _), tok) in enumerate(zip(spec, fields)):
                try:
                    rows[j].append(float(tok) if t == "float" else int(tok))
                except ValueError:
                    raise FormatError(f"vertex row {i}: bad value {tok!r}", off + pos) from None
            if nl < 0 and i < n - 1:
                raise FormatError(
                    f"payload truncated: {i + 1} of {n} vertices present", len(data))
            pos = (nl + 1) if nl >= 0 else len(body)
            if pos >= len(body) and i < n - 1:
                raise FormatError(
                    f"payload truncated: {i + 1} of {n} vertices present", len(data))
        for (name, t, dt), vals in zip(spec, rows):
            columns[name] = np.asarray(vals, dtype=np.float64 if t == "float" else np.int64)
            if t != "float":
                columns[name] = columns[name].astype(dt)
            else:
                columns[name] = columns[name].astype(np.float32).astype(np.float64)
    return _assemble(columns, scene_id)


# ---------------------------------------------------------------------------
# Columnar native format

def _save_columnar(pc: PointCloud, path: Path):
    props = _present_props(pc)
    sid = pc.scene_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_COLUMNAR_MAGIC)
        fh.write(struct.pack("<H", _COLUMNAR_VERSION))
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<Q", len(pc)))
        fh.write(struct.pack("<B", len(props)))
        for name in props:
            nb = name.encode("ascii")
            fh.write(struct.pack("<B", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _COLUMNAR_FIELDS[name]))
        for name in props:
            dt = np.dtype(_COLUMNAR_DTYPES[_COLUMNAR_FIELDS[name]])
            fh.write(np.ascontiguousarray(_column(pc, name), dtype=dt).tobytes())


def _load_columnar(data: bytes, default_scene_id: str) -> PointCloud:
    off = 0

    def need(k: int, what: str) -> bytes:
        nonlocal off
        if len(data) - off < k:
            raise FormatError(f"truncated {what}", len(data))
        chunk = data[off:off + k]
        off += k
        return chunk

    if data[:len(_COLUMNAR_MAGIC)] != _COLUMNAR_MAGIC:
        raise FormatError("bad magic bytes", 0)
    off = len(_COLUMNAR_MAGIC)
    (version,) = struct.unpack("<H", need(2, "header"))
    if version != _COLUMNAR_VERSION:
        raise FormatError(f"unsupported columnar version {version}", off - 2)
    (sid_len,) = struct.unpack("<H", need(2, "header"))
    scene_id = need(sid_len, "scene id").decode("utf-8") or default_scene_id
    (n,) = struct.unpack("<Q", need(8, "header"))
    (n_fields,) = struct.unpack("<B", need(1, "header"))
    fields = []
    for _ in range(n_fields):
        (name_len,) = struct.unpack("<B", need(1, "field name"))
        name = need(name_len, "field name").decode("ascii")
        (code,) = struct.unpack("<B", need(1, "field dtype"))
        if name not in _COLUMNAR_FIELDS or code not in _COLUMNAR_DTYPES:
            raise FormatError(f"unknown field {name!r} / dtype code {code}", off - 1)
        if code != _COLUMNAR_FIELDS[name]:
            raise FormatError(f"field {name!r} has wrong dtype code {code}", off - 1)
        fields.append((name, np.dtype(_COLUMNAR_DTYPES[code])))

    columns: dict[str, np.ndarray] = {}
    for name, dt in fields:
        nbytes = n * dt.itemsize
        if len(data) - off < nbytes:
            have = (len(data) - off) // dt.itemsize
            raise FormatError(
                f"field {name!r} truncated: {have} of {n} values present",
                off + have * dt.itemsize)
        columns[name] = np.frombuffer(data, dtype=dt, count=n, offset=off).astype(
            np.float64 if dt.kind == "f" else np.int64)
        off += nbytes
    for req in ("x", "y", "z"):
        if req not in columns:
            raise FormatError(f"missing coordinate field {req!r}", len(data))
    lengths = {name: len(col) for name, col in columns.items()}
    if len(set(lengths.values())) > 1:
        raise FormatError(f"inconsistent column lengths {lengths}", len(data))
    return _assemble(columns, scene_id)


# ---------------------------------------------------------------------------
# Public API

def detect_format(path) -> str:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(_COLUMNAR_MAGIC):
        return "columnar"
    if head.startswith(b"ply\n"):
        with open(path, "rb") as fh:
            data = fh.read(4096)
        return "ply_binary_le" if b"binary_little_endian" in data else "ply_ascii"
    raise FormatError(f"cannot detect format of {path}", 0)


def load_pointcloud(path, format: str | None = None) -> PointCloud:
    """Read a scan; ``format`` is auto-detected when omitted."""
    path = Path(path)
    if format is None:
        format = detect_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}")
    data = path.read_bytes()
    if format == "columnar":
        return _load_columnar(data, path.stem)
    return _load_ply(data, path.stem)


def save_pointcloud(pc: PointCloud, path, format: str = "columnar") -> None:
    """Write a scan so that a reload reproduces it at the format's precision."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}")
    _check_labels_fit(pc)
    path = Path(path)
    if format == "columnar":
        _save_columnar(pc, path)
    else:
        _save_ply(pc, path, binary=(format == "ply_binary_le"))


# ---------------------------------------------------------------------------
# Manifests

def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["# shellseg manifest", f"label_space\t{manifest.label_space}"]
    lines += [f"{sid}\t{rel}\t{split}" for sid, rel, split in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    label_space = ""
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if fields[0] == "label_space":
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: bad label_space line")
            label_space = fields[1]
            continue
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'scene_id path split'")
        rows.append(tuple(fields))
    return DatasetManifest(tuple(rows), label_space, path.parent)
