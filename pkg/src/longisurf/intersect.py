"""Mesh self-intersection detection with an exact triangle-triangle test.

A pair of faces counts as self-intersecting when they properly intersect
and share no vertex index; coplanar overlapping faces count. The narrow
phase is a vectorized interval test on the plane-intersection line (after
Moller 1997) with a small epsilon on the separating-sign tests; coplanar
pairs fall back to an exact 2D overlap test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh

_NARROW_CHUNK = 500_000


def _unit_normals(tri):
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)


def _signed_dists(tri, plane_pt, plane_n, eps):
    d = np.einsum("ikj,ij->ik", tri - plane_pt[:, None, :], plane_n)
    d[np.abs(d) < eps] = 0.0
    return d


def _cross_interval(proj, dist):
    """Parameter interval where a triangle meets the other's plane.

    Candidates are edge crossings (strict sign change) and vertices lying
    on the plane; an empty candidate set yields an inverted interval that
    can never overlap.
    """
    m = len(proj)
    tmin = np.full(m, np.inf)
    tmax = np.full(m, -np.inf)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        di, dj = dist[:, i], dist[:, j]
        crossing = di * dj < 0
        den = np.where(crossing, di - dj, 1.0)
        t = proj[:, i] + (proj[:, j] - proj[:, i]) * np.where(
            crossing, di / den, 0.0
        )
        tmin = np.where(crossing & (t < tmin), t, tmin)
        tmax = np.where(crossing & (t > tmax), t, tmax)
    for i in range(3):
        on = dist[:, i] == 0
        t = proj[:, i]
        tmin = np.where(on & (t < tmin), t, tmin)
        tmax = np.where(on & (t > tmax), t, tmax)
    return tmin, tmax


def triangles_intersect(tri_a, tri_b, eps: float = 1e-12) -> np.ndarray:
    """Pairwise intersection test between matched triangle arrays.

    Both inputs are (m, 3, 3); entry i of one is tested against entry i of
    the other. Touching contacts count as intersections; coplanar pairs are
    resolved by 2D overlap.
    """
    A = np.asarray(tri_a, dtype=np.float64)
    B = np.asarray(tri_b, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
        B = B[None]
    m = len(A)
    n_a = _unit_normals(A)
    n_b = _unit_normals(B)
    dv = _signed_dists(A, B[:, 0], n_b, eps)  # A's vertices vs B's plane
    du = _signed_dists(B, A[:, 0], n_a, eps)

    sep = (
        (dv > 0).all(axis=1)
        | (dv < 0).all(axis=1)
        | (du > 0).all(axis=1)
        | (du < 0).all(axis=1)
    )
    coplanar = (dv == 0).all(axis=1)
    alive = ~sep & ~coplanar

    out = np.zeros(m, dtype=bool)
    if alive.any():
        idx = np.flatnonzero(alive)
        line = np.cross(n_a[idx], n_b[idx])
        pa = np.einsum("ikj,ij->ik", A[idx], line)
        pb = np.einsum("ikj,ij->ik", B[idx], line)
        amin, amax = _cross_interval(pa, dv[idx])
        bmin, bmax = _cross_interval(pb, du[idx])
        out[idx] = (amin <= bmax) & (bmin <= amax)

    cop = np.flatnonzero(coplanar & ~sep)
    for i in cop:
        out[i] = _coplanar_intersect(A[i], B[i], n_b[i], eps)
    return out


def _coplanar_intersect(A, B, n, eps) -> bool:
    axis = int(np.argmax(np.abs(n)))
    keep = [k for k in range(3) if k != axis]
    a2 = A[:, keep]
    b2 = B[:, keep]
    scale = max(1.0, float(np.abs(np.concatenate([a2, b2])).max()))
    tol = eps * scale * scale
    for i in range(3):
        for j in range(3):
            if _segments_intersect_2d(
                a2[i], a2[(i + 1) % 3], b2[j], b2[(j + 1) % 3], tol
            ):
                return True
    return _point_in_tri_2d(a2[0], b2, tol) or _point_in_tri_2d(
        b2[0], a2, tol
    )


def _orient2(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment_2d(a, b, c, tol) -> bool:
    return (
        min(a[0], b[0]) - tol <= c[0] <= max(a[0], b[0]) + tol
        and min(a[1], b[1]) - tol <= c[1] <= max(a[1], b[1]) + tol
    )


def _segments_intersect_2d(p1, p2, q1, q2, tol) -> bool:
    d1 = _orient2(q1, q2, p1)
    d2 = _orient2(q1, q2, p2)
    d3 = _orient2(p1, p2, q1)
    d4 = _orient2(p1, p2, q2)
    if abs(d1) < tol:
        d1 = 0.0
    if abs(d2) < tol:
        d2 = 0.0
    if abs(d3) < tol:
        d3 = 0.0
    if abs(d4) < tol:
        d4 = 0.0
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and (
        (d3 > 0) != (d4 > 0)
    ) and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and _on_segment_2d(q1, q2, p1, tol):
        return True
    if d2 == 0 and _on_segment_2d(q1, q2, p2, tol):
        return True
    if d3 == 0 and _on_segment_2d(p1, p2, q1, tol):
        return True
    if d4 == 0 and _on_segment_2d(p1, p2, q2, tol):
        return True
    return False


def _point_in_tri_2d(p, tri, tol) -> bool:
    s0 = _orient2(tri[0], tri[1], p)
    s1 = _orient2(tri[1], tri[2], p)
    s2 = _orient2(tri[2], tri[0], p)
    return (s0 >= -tol and s1 >= -tol and s2 >= -tol) or (
        s0 <= tol and s1 <= tol and s2 <= tol
    )


@dataclass(frozen=True)
class SelfIntersectionReport:
    count: int
    ratio: float
    face_ids: np.ndarray

    def to_json(self) -> dict:
        return {"sif_count": self.count, "sif_ratio": self.ratio}


def _shared_vertex(faces_a, faces_b):
    return (faces_a[:, :, None] == faces_b[:, None, :]).any(axis=(1, 2))


def self_intersecting_faces(
    mesh: TriangleMesh, eps: float = 1e-12, method: str = "indexed"
) -> SelfIntersectionReport:
    """Faces that properly intersect a non-adjacent face of the same mesh.

    Adjacency is by shared vertex index; such contacts are excluded. With
    ``method="exhaustive"`` every face pair is tested (the oracle for the
    accelerated path); the default broad phase prunes by face bounding
    spheres and gives the identical flagged set.
    """
    F = mesh.n_faces
    if F == 0:
        return SelfIntersectionReport(0, 0.0, np.empty(0, dtype=np.int64))
    tris = mesh.triangles()
    if method == "exhaustive":
        if F > 5000:
            raise ValueError("exhaustive method is quadratic; use indexed")
        ii, jj = np.triu_indices(F, k=1)
        ii = ii.astype(np.intp)
        jj = jj.astype(np.intp)
    elif method == "indexed":
        cent = tris.mean(axis=1)
        radius = np.linalg.norm(tris - cent[:, None, :], axis=2).max(axis=1)
        rmax = float(radius.max())
        slack = 1e-12 * (1.0 + float(np.abs(mesh.vertices).max()))
        tree = cKDTree(cent)
        lists = tree.query_ball_point(
            cent, radius + rmax + slack, workers=-1, return_sorted=False
        )
        counts = np.fromiter((len(l) for l in lists), dtype=np.intp, count=F)
        ii = np.repeat(np.arange(F, dtype=np.intp), counts)
        jj = np.concatenate([np.asarray(l, dtype=np.intp) for l in lists])
        fwd = ii < jj
        ii, jj = ii[fwd], jj[fwd]
    else:
        raise ValueError(f"unknown method {method!r}")

    flagged = np.zeros(F, dtype=bool)
    for lo in range(0, len(ii), _NARROW_CHUNK):
        hi = min(lo + _NARROW_CHUNK, len(ii))
        ci, cj = ii[lo:hi], jj[lo:hi]
        keep = ~_shared_vertex(mesh.faces[ci], mesh.faces[cj])
        ci, cj = ci[keep], cj[keep]
        if len(ci) == 0:
            continue
        hit = triangles_intersect(tris[ci], tris[cj], eps)
        flagged[ci[hit]] = True
        flagged[cj[hit]] = True
    ids = np.flatnonzero(flagged).astype(np.int64)
    return SelfIntersectionReport(int(ids.size), float(ids.size) / F, ids)
