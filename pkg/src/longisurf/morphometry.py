"""Per-vertex morphology (mean curvature, bilateral cortical thickness) and
the longitudinal consistency scores built on them.

Curvature follows the cotangent scheme with mixed Voronoi areas and the
obtuse-triangle correction (Meyer et al. discrete differential-geometry
operators); the sign comes from the outward normal, so folding direction
is preserved and rigid motions leave the field unchanged.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import (
    ConnectivityTag,
    LongitudinalSubject,
    MeshError,
    TriangleMesh,
    validate,
    vertex_normals,
)
from .spatial import SurfaceIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VertexScalarField:
    """One scalar per vertex of a tagged connectivity."""

    values: np.ndarray
    tag: ConnectivityTag
    units: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) != self.tag.n_vertices:
            raise ValueError(
                f"field length {v.shape} does not match tagged vertex count "
                f"{self.tag.n_vertices}"
            )


@dataclass(frozen=True)
class RegionLabeling:
    """Dense integer class labels on a tagged connectivity."""

    labels: np.ndarray
    names: tuple
    tag: ConnectivityTag

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "names", tuple(self.names))
        if lab.ndim != 1 or len(lab) != self.tag.n_vertices:
            raise ValueError("label length does not match tagged vertex count")
        if len(lab) and (lab.min() < 0 or lab.max() >= len(self.names)):
            raise ValueError(
                f"label ids must be dense in [0, {len(self.names)})"
            )

    @property
    def n_regions(self) -> int:
        return len(self.names)

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_regions)


def save_vertex_field(field: VertexScalarField, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "value"])
        for i, x in enumerate(field.values):
            w.writerow([i, format(x, ".17g")])


def load_vertex_field(path, tag: ConnectivityTag, units: str = "") -> VertexScalarField:
    p = Path(path)
    with open(p, newline="", encoding="ascii") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["vertex_id", "value"]:
            raise ValueError(f"{p}: expected header 'vertex_id,value'")
        rows = [(int(a), float(b)) for a, b in r]
    values = np.full(tag.n_vertices, np.nan)
    for i, x in rows:
        values[i] = x
    return VertexScalarField(values, tag, units)


def save_labeling(labeling: RegionLabeling, csv_path, names_path) -> None:
    with open(csv_path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "label_id"])
        for i, lab in enumerate(labeling.labels):
            w.writerow([i, int(lab)])
    Path(names_path).write_text(
        json.dumps({str(i): n for i, n in enumerate(labeling.names)},
                   indent=2, sort_keys=True) + "\n",
        encoding="ascii",
    )


def load_labeling(csv_path, names_path, tag: ConnectivityTag) -> RegionLabeling:
    with open(csv_path, newline="", encoding="ascii") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["vertex_id", "label_id"]:
            raise ValueError(f"{csv_path}: expected header 'vertex_id,label_id'")
        rows = [(int(a), int(b)) for a, b in r]
    table = json.loads(Path(names_path).read_text(encoding="ascii"))
    names = [table[str(i)] for i in range(len(table))]
    labels = np.zeros(tag.n_vertices, dtype=np.int64)
    seen = np.zeros(tag.n_vertices, dtype=bool)
    for i, lab in rows:
        labels[i] = lab
        seen[i] = True
    if not seen.all():
        raise ValueError(f"{csv_path}: {int((~seen).sum())} vertices unlabeled")
    return RegionLabeling(labels, names, tag)


def _corner_cotangents(mesh: TriangleMesh):
    f = mesh.faces
    p0, p1, p2 = (mesh.vertices[f[:, k]] for k in range(3))

    def cot(u, v):
        c = np.cross(u, v)
        denom = np.linalg.norm(c, axis=1)
        return np.einsum("ij,ij->i", u, v) / np.where(denom == 0, np.nan, denom)

    return (
        cot(p1 - p0, p2 - p0),
        cot(p2 - p1, p0 - p1),
        cot(p0 - p2, p1 - p2),
    )


def _mixed_voronoi_areas(mesh: TriangleMesh, cots) -> np.ndarray:
    f = mesh.faces
    V = mesh.n_vertices
    p0, p1, p2 = (mesh.vertices[f[:, k]] for k in range(3))
    cot0, cot1, cot2 = cots
    area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    l0 = np.einsum("ij,ij->i", p2 - p1, p2 - p1)  # squared edge opposite corner 0
    l1 = np.einsum("ij,ij->i", p0 - p2, p0 - p2)
    l2 = np.einsum("ij,ij->i", p1 - p0, p1 - p0)
    obt = (cot0 < 0, cot1 < 0, cot2 < 0)
    any_obt = obt[0] | obt[1] | obt[2]
    voronoi = (
        (l2 * cot2 + l1 * cot1) / 8.0,
        (l0 * cot0 + l2 * cot2) / 8.0,
        (l1 * cot1 + l0 * cot0) / 8.0,
    )
    amix = np.zeros(V)
    for k in range(3):
        contrib = np.where(
            any_obt, np.where(obt[k], area / 2.0, area / 4.0), voronoi[k]
        )
        amix += np.bincount(f[:, k], weights=contrib, minlength=V)
    return amix


def mean_curvature(
    mesh: TriangleMesh, degenerate: str = "error"
) -> VertexScalarField:
    """Signed discrete mean curvature per vertex (1/mm).

    The curvature normal at vertex v is the cotangent-weighted sum of edge
    vectors over twice the mixed Voronoi area; its half-norm is the mean
    curvature magnitude and the sign is taken against the outward vertex
    normal, so a sphere with outward orientation is positive everywhere.

    ``degenerate="error"`` rejects zero mixed areas (reporting the vertex);
    ``"nan"`` marks them NaN so downstream medians can skip them.
    """
    rep = validate(mesh)
    if not rep.closed:
        raise MeshError("mean curvature requires a closed mesh")
    if not rep.oriented:
        raise MeshError("mean curvature requires a consistently oriented mesh")
    f = mesh.faces
    V = mesh.n_vertices
    cots = _corner_cotangents(mesh)
    amix = _mixed_voronoi_areas(mesh, cots)
    bad = ~(amix > 0) | ~np.isfinite(amix)
    if bad.any() and degenerate == "error":
        raise MeshError(
            f"vertex {int(np.flatnonzero(bad)[0])}: zero or undefined mixed "
            "area"
        )

    K = np.zeros((V, 3))
    # edge (i, j) weighted by the cotangent of the opposite corner
    for (ca, cb, cw) in ((1, 2, cots[0]), (2, 0, cots[1]), (0, 1, cots[2])):
        d = mesh.vertices[f[:, ca]] - mesh.vertices[f[:, cb]]
        wd = cw[:, None] * d
        for c in range(3):
            K[:, c] += np.bincount(f[:, ca], weights=wd[:, c], minlength=V)
            K[:, c] -= np.bincount(f[:, cb], weights=wd[:, c], minlength=V)
    with np.errstate(invalid="ignore", divide="ignore"):
        K /= (2.0 * amix)[:, None]
    normals = vertex_normals(mesh)
    h = 0.5 * np.linalg.norm(K, axis=1)
    sign = np.sign(np.einsum("ij,ij->i", K, normals))
    values = np.where(sign == 0, 0.0, sign) * h
    if bad.any():
        values = values.copy()
        values[bad] = np.nan
    return VertexScalarField(values, mesh.tag, units="1/mm")


def cortical_thickness(wm: TriangleMesh, pial: TriangleMesh) -> VertexScalarField:
    """Bilateral thickness: mean of the two vertexwise point-to-surface
    distances (inner vertex to outer surface and vice versa), in mm.

    Both meshes must carry the same connectivity tag so vertex k
    corresponds across surfaces.
    """
    if wm.tag != pial.tag:
        raise MeshError("thickness needs matching connectivity tags")
    d_wp, _, _ = SurfaceIndex(pial).nearest(wm.vertices)
    d_pw, _, _ = SurfaceIndex(wm).nearest(pial.vertices)
    return VertexScalarField(0.5 * (d_wp + d_pw), wm.tag, units="mm")


def longitudinal_variance(fields) -> tuple[VertexScalarField, float]:
    """Unbiased per-vertex variance across a subject's visits plus the
    vertex-median subject score.

    Serves curvature (MCVar) and thickness (CThVar) alike. NaN vertices in
    any visit are excluded from the median with a logged count. Requires at
    least one follow-up visit.
    """
    fields = list(fields)
    if len(fields) < 2:
        raise ValueError("insufficient visits: variance needs >= 2")
    tag = fields[0].tag
    for fld in fields[1:]:
        if fld.tag != tag:
            raise MeshError("visit fields do not share connectivity")
    stack = np.stack([f.values for f in fields])
    # shifting by one visit leaves the variance unchanged and makes
    # identical visit sequences yield exact zeros
    var = (stack - stack[0]).var(axis=0, ddof=1)
    n_nan = int(np.isnan(var).sum())
    if n_nan:
        logger.warning(
            "longitudinal variance: %d vertices undefined, excluded from "
            "the median",
            n_nan,
        )
    score = float(np.nanmedian(var)) if n_nan < len(var) else float("nan")
    base = fields[0].units
    units = f"({base})^2" if base else ""
    return VertexScalarField(var, tag, units=units), score


def parc_f1(
    subject: LongitudinalSubject,
    labeling: RegionLabeling,
    pair_mode: str = "all",
) -> tuple[np.ndarray, float]:
    """Region-overlap consistency of labels transported between visits.

    For every visit pair, each vertex's label is compared with the label of
    its nearest vertex (Euclidean) in the other visit, in both directions,
    pooling one confusion matrix. Returns per-region F1 (NaN for empty
    regions) and the region-size-weighted surface score.

    ``pair_mode`` is ``"all"`` (every unordered pair) or ``"consecutive"``.
    """
    if labeling.tag != subject.tag:
        raise MeshError("labeling does not match subject connectivity")
    visits = subject.visits
    if len(visits) < 2:
        raise ValueError("insufficient visits: ParcF1 needs >= 2")
    if pair_mode == "all":
        pairs = [
            (j, k)
            for j in range(len(visits))
            for k in range(j + 1, len(visits))
        ]
    elif pair_mode == "consecutive":
        pairs = [(j, j + 1) for j in range(len(visits) - 1)]
    else:
        raise ValueError(f"unknown pair_mode {pair_mode!r}")

    labels = labeling.labels
    C = labeling.n_regions
    conf = np.zeros((C, C), dtype=np.int64)
    trees = [cKDTree(m.vertices) for m in visits]
    for j, k in pairs:
        for src, dst in ((j, k), (k, j)):
            _, nn = trees[dst].query(visits[src].vertices, workers=-1)
            np.add.at(conf, (labels, labels[nn]), 1)

    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    denom = 2 * tp + fn + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / np.where(denom == 0, 1, denom), np.nan)
    sizes = labeling.region_sizes()
    present = sizes > 0
    f1 = np.where(present, f1, np.nan)
    weighted = float(
        np.sum(sizes[present] * f1[present]) / labeling.tag.n_vertices
    )
    return f1, weighted
