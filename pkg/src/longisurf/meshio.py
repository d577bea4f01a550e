"""Mesh file I/O: OFF read/write (canonical format), ASCII PLY read-only.

Coordinates are serialized with 17 significant digits so that a save/load
round trip reproduces the float64 vertex array bit for bit. Per-vertex
feature channels travel in a CSV sidecar next to the mesh file.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import MeshError, TriangleMesh


class MeshFormatError(MeshError):
    """Parse failure; message carries file path and 1-based line number."""


def _fmt(x: float) -> str:
    return format(x, ".17g")


def feature_sidecar_path(path) -> Path:
    """Feature CSV companion of a mesh file: ``foo.off`` -> ``foo.features.csv``."""
    p = Path(path)
    return p.with_name(p.stem + ".features.csv")


def load_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Read a triangle mesh from OFF or ASCII PLY.

    The format is inferred from the extension unless given explicitly.
    Feature channels are never loaded here; use :func:`load_features` and
    :meth:`TriangleMesh.with_features` to attach a sidecar.
    """
    p = Path(path)
    if fmt is None:
        fmt = p.suffix.lstrip(".").lower()
    fmt = fmt.lower()
    if fmt == "off":
        return _load_off(p)
    if fmt == "ply":
        return _load_ply(p)
    raise MeshFormatError(f"{p}: unsupported format {fmt!r}")


def save_mesh(mesh: TriangleMesh, path, fmt: str = "off") -> None:
    """Write a mesh as OFF; features go to the CSV sidecar if present.

    PLY is read-only in this toolkit; requesting it raises.
    """
    p = Path(path)
    if fmt.lower() != "off":
        raise MeshFormatError(
            f"{p}: cannot write format {fmt!r} (PLY is read-only; OFF is "
            "the canonical interchange format)"
        )
    if mesh.n_vertices == 0:
        raise MeshError("empty mesh")
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    for v in mesh.vertices:
        lines.append(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    p.write_text("\n".join(lines) + "\n", encoding="ascii")
    if mesh.features is not None:
        save_features(mesh.features, feature_sidecar_path(p))


def save_features(features: np.ndarray, path) -> None:
    feat = np.asarray(features, dtype=np.float64)
    d = feat.shape[1]
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{k}" for k in range(d)])
        for row in feat:
            w.writerow([_fmt(x) for x in row])


def load_features(path) -> np.ndarray:
    """Read a feature sidecar CSV with header ``f0,...,f{D-1}``."""
    p = Path(path)
    with open(p, newline="", encoding="ascii") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header != [f"f{k}" for k in range(len(header))]:
            raise MeshFormatError(f"{p}:1: malformed feature header")
        rows = [[float(x) for x in row] for row in r]
    if not rows:
        return np.zeros((0, len(header)))
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] != len(header):
        raise MeshFormatError(f"{p}: ragged feature rows")
    return arr


def _meaningful_lines(p: Path):
    """Yield (lineno, tokens) skipping blanks and '#' comments."""
    with open(p, encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _load_off(p: Path) -> TriangleMesh:
    it = _meaningful_lines(p)
    try:
        lineno, toks = next(it)
    except StopIteration:
        raise MeshFormatError(f"{p}:1: empty file") from None
    if toks[0] != "OFF":
        raise MeshFormatError(f"{p}:{lineno}: missing OFF header")
    counts = toks[1:]
    if not counts:
        try:
            lineno, counts = next(it)
        except StopIteration:
            raise MeshFormatError(f"{p}:{lineno}: missing counts line") from None
    if len(counts) < 2:
        raise MeshFormatError(f"{p}:{lineno}: counts line needs 'V F E'")
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except ValueError:
        raise MeshFormatError(f"{p}:{lineno}: non-integer counts") from None
    if nv < 0 or nf < 0:
        raise MeshFormatError(f"{p}:{lineno}: negative counts")

    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshFormatError(
                f"{p}: unexpected end of file, expected {nv} vertices"
            ) from None
        if len(toks) != 3:
            raise MeshFormatError(
                f"{p}:{lineno}: expected 3 coordinates, got {len(toks)}"
            )
        try:
            verts[i] = [float(t) for t in toks]
        except ValueError:
            raise MeshFormatError(f"{p}:{lineno}: bad coordinate") from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshFormatError(
                f"{p}: unexpected end of file, expected {nf} faces"
            ) from None
        try:
            ints = [int(t) for t in toks]
        except ValueError:
            raise MeshFormatError(f"{p}:{lineno}: bad face index") from None
        if ints[0] != 3 or len(ints) != 4:
            raise MeshFormatError(f"{p}:{lineno}: non-triangle face")
        for idx in ints[1:]:
            if idx < 0 or idx >= nv:
                raise MeshFormatError(
                    f"{p}:{lineno}: vertex index {idx} out of range [0, {nv})"
                )
        faces[i] = ints[1:]
    return TriangleMesh(verts, faces)


def _load_ply(p: Path) -> TriangleMesh:
    with open(p, encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{p}:1: missing 'ply' magic")
    elements = []  # (name, count, properties)
    i = 1
    ascii_fmt = False
    while i < len(lines):
        toks = lines[i].strip().split()
        i += 1
        if not toks or toks[0] == "comment":
            continue
        if toks[0] == "format":
            if len(toks) < 2 or toks[1] != "ascii":
                raise MeshFormatError(f"{p}:{i}: only ASCII PLY is supported")
            ascii_fmt = True
        elif toks[0] == "element":
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise MeshFormatError(f"{p}:{i}: property before element")
            elements[-1][2].append(toks[1:])
        elif toks[0] == "end_header":
            break
    else:
        raise MeshFormatError(f"{p}: missing end_header")
    if not ascii_fmt:
        raise MeshFormatError(f"{p}: missing 'format ascii 1.0'")

    verts = None
    faces = None
    for name, count, props in elements:
        if name == "vertex":
            names = [pr[-1] for pr in props]
            try:
                cols = [names.index(ax) for ax in ("x", "y", "z")]
            except ValueError:
                raise MeshFormatError(
                    f"{p}: vertex element lacks x/y/z properties"
                ) from None
            verts = np.empty((count, 3), dtype=np.float64)
            for k in range(count):
                toks = lines[i].split()
                if len(toks) != len(names):
                    raise MeshFormatError(f"{p}:{i + 1}: short vertex row")
                verts[k] = [float(toks[c]) for c in cols]
                i += 1
        elif name == "face":
            faces = np.empty((count, 3), dtype=np.int64)
            for k in range(count):
                toks = lines[i].split()
                if not toks or int(toks[0]) != 3:
                    raise MeshFormatError(f"{p}:{i + 1}: non-triangle face")
                faces[k] = [int(t) for t in toks[1:4]]
                i += 1
        else:
            i += count  # skip unknown element payload
    if verts is None:
        raise MeshFormatError(f"{p}: no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshFormatError(
            f"{p}: face vertex index out of range [0, {len(verts)})"
        )
    return TriangleMesh(verts, faces)
