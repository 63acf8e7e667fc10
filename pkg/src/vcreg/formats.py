"""Point cloud file formats: OFF (ASCII), KITTI velodyne ``.bin``, ASCII PLY, plain XYZ,
and the line-oriented dataset manifest."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import as_cloud


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------- OFF


def load_off(path):
    """Vertices of an ASCII OFF file; faces are ignored.

    Accepts the header and counts on one line (``OFF8 0 0``) as found in
    some ModelNet files, and ``#`` comments.
    """
    raw = Path(path).read_bytes()
    tokens = []  # (token, byte offset)
    pos = 0
    for line in raw.splitlines(keepends=True):
        body = line.split(b"#", 1)[0]
        start = 0
        for tok in body.split():
            start = body.index(tok, start)
            tokens.append((tok, pos + start))
            start += len(tok)
        pos += len(line)
    if not tokens or not tokens[0][0].startswith(b"OFF"):
        raise ParseError("missing OFF header", 0, path)
    head, off = tokens[0]
    rest = tokens[1:]
    if head != b"OFF":
        rest = [(head[3:], off + 3)] + rest
    if len(rest) < 3:
        raise ParseError("missing vertex/face/edge counts", len(raw), path)
    try:
        nv, nf = int(rest[0][0]), int(rest[1][0])
    except ValueError as exc:
        raise ParseError(f"bad counts: {exc}", rest[0][1], path) from None
    if nv < 1 or nf < 0:
        raise ParseError(f"invalid counts {nv} vertices / {nf} faces", rest[0][1], path)
    coords = rest[3:3 + 3 * nv]
    if len(coords) < 3 * nv:
        raise ParseError(f"truncated vertex list: expected {3 * nv} values, found {len(coords)}", len(raw), path)
    values = np.empty(3 * nv)
    for i, (tok, where) in enumerate(coords):
        try:
            values[i] = float(tok)
        except ValueError:
            raise ParseError(f"bad coordinate {tok!r}", where, path) from None
    return as_cloud(values.reshape(nv, 3))


def write_off(path, points):
    pts = as_cloud(points)
    lines = ["OFF", f"{len(pts)} 0 0"]
    lines += [" ".join(_fmt(v) for v in p) for p in pts]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- KITTI


def load_kitti_bin(path):
    """KITTI velodyne scan: little-endian float32 (x, y, z, reflectance) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ParseError(f"truncated record ({len(raw) % 16} trailing bytes)", len(raw) - len(raw) % 16, path)
    if not raw:
        raise ParseError("empty scan", 0, path)
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64)


def write_kitti_bin(path, points, reflectance=None):
    pts = np.asarray(points, dtype=np.float64)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if reflectance is not None:
        rec[:, 3] = reflectance
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------- PLY / XYZ

COLORS = {"blue": (0, 0, 255), "green": (0, 255, 0), "red": (255, 0, 0)}


def write_ply(path, points, color=None):
    """ASCII PLY with optional uniform per-vertex colour (a name from COLORS or an RGB triple)."""
    pts = np.asarray(points, dtype=np.float64)
    rgb = COLORS.get(color, color) if color is not None else None
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z"]
    if rgb is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    body = []
    for p in pts:
        row = " ".join(_fmt(v) for v in p)
        if rgb is not None:
            row += " " + " ".join(str(int(c)) for c in rgb)
        body.append(row)
    Path(path).write_text("\n".join(header + body) + "\n")


def load_ply(path):
    """Read an ASCII PLY written by :func:`write_ply`; returns ``(points, colors or None)``."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply magic", 0, path)
    n, props, i = None, [], 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "ascii"] or parts[:1] == ["comment"]:
            pass
        elif parts[:1] == ["format"]:
            raise ParseError(f"unsupported PLY format {parts[1]}", None, path)
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append(parts[-1])
        i += 1
    if n is None or i == len(lines):
        raise ParseError("incomplete PLY header", None, path)
    rows = lines[i + 1:i + 1 + n]
    if len(rows) < n:
        raise ParseError(f"expected {n} vertices, found {len(rows)}", len(text), path)
    data = np.array([[float(v) for v in r.split()] for r in rows]) if n else np.empty((0, len(props)))
    pts = data[:, [props.index(a) for a in "xyz"]]
    colors = data[:, [props.index(c) for c in ("red", "green", "blue")]].astype(int) if "red" in props else None
    return pts, colors


def load_xyz(path):
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return as_cloud(pts[:, :3])


def load_cloud(path):
    """Dispatch on extension: .off, .bin, .ply, otherwise whitespace-separated xyz."""
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return load_off(path)
    if suffix == ".bin":
        return load_kitti_bin(path)
    if suffix == ".ply":
        return as_cloud(load_ply(path)[0])
    return load_xyz(path)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    protocol: str
    seed: int


def read_manifest(path):
    """Lines of ``<cloud path> <protocol> <seed>``; relative paths resolve against the manifest."""
    base = Path(path).parent
    entries = []
    offset = 0
    for line in Path(path).read_bytes().splitlines(keepends=True):
        text = line.decode().split("#", 1)[0].strip()
        if text:
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"manifest line needs 3 fields, got {len(parts)}", offset, path)
            try:
                seed = int(parts[2])
            except ValueError:
                raise ParseError(f"bad seed {parts[2]!r}", offset, path) from None
            p = Path(parts[0])
            entries.append(ManifestEntry(p if p.is_absolute() else base / p, parts[1], seed))
        offset += len(line)
    return entries


def write_manifest(path, entries):
    base = Path(path).parent.resolve()
    lines = ["# cloud protocol seed"]
    for e in entries:
        p = Path(e.path).resolve()
        try:
            p = p.relative_to(base)
        except ValueError:
            pass
        lines.append(f"{p} {e.protocol} {e.seed}")
    Path(path).write_text("\n".join(lines) + "\n")
