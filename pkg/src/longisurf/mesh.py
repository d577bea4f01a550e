"""Triangle mesh containers, connectivity identity, validation, and normals.

Meshes are immutable after construction and safe to share across threads.
Vertex order is meaningful: index k refers to the same anatomical location
in every mesh that carries the same connectivity tag.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class MeshError(Exception):
    """Invalid mesh topology, geometry, or incompatible connectivity."""


@dataclass(frozen=True)
class ConnectivityTag:
    """Identity of a mesh connectivity: vertex count plus face-array digest.

    Two meshes are vertex-comparable iff their tags are equal. The tag is
    invariant under vertex-coordinate changes.
    """

    n_vertices: int
    face_digest: str

    @classmethod
    def of(cls, n_vertices: int, faces: np.ndarray) -> "ConnectivityTag":
        f = np.ascontiguousarray(faces, dtype=np.int64)
        h = hashlib.sha256()
        h.update(np.int64(n_vertices).tobytes())
        h.update(f.tobytes())
        return cls(int(n_vertices), h.hexdigest())


class TriangleMesh:
    """Closed-or-open oriented triangle surface in millimetres.

    Parameters
    ----------
    vertices : array_like
        (V, 3) float coordinates.
    faces : array_like
        (F, 3) integer vertex indices. All indices must lie in [0, V).
    features : array_like, optional
        (V, D) per-vertex feature channels (dimensionless). Carried through
        I/O via a sidecar file; never altered by geometric operations.

    Raises
    ------
    MeshError
        On malformed shapes or face indices outside [0, V).
    """

    __slots__ = ("vertices", "faces", "features", "_tag")

    def __init__(self, vertices, faces, features=None):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(f.max() if f.max() >= len(v) else f.min())
            raise MeshError(
                f"face vertex index {bad} out of range [0, {len(v)})"
            )
        self.vertices = v
        self.faces = f
        if features is not None:
            feat = np.asarray(features, dtype=np.float64)
            if feat.ndim != 2 or feat.shape[0] != len(v):
                raise MeshError(
                    f"features must be (V, D) with V={len(v)}, got {feat.shape}"
                )
            self.features = feat
        else:
            self.features = None
        self._tag = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def tag(self) -> ConnectivityTag:
        if self._tag is None:
            self._tag = ConnectivityTag.of(self.n_vertices, self.faces)
        return self._tag

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same connectivity and features, new coordinates."""
        return TriangleMesh(vertices, self.faces, self.features)

    def with_features(self, features) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces, features)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), each row sorted ascending."""
        e = directed_edges(self.faces)
        return np.unique(np.sort(e, axis=1), axis=0)

    def face_areas(self) -> np.ndarray:
        v0 = self.vertices[self.faces[:, 0]]
        v1 = self.vertices[self.faces[:, 1]]
        v2 = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero-area faces yield a zero vector."""
        v0 = self.vertices[self.faces[:, 0]]
        v1 = self.vertices[self.faces[:, 1]]
        v2 = self.vertices[self.faces[:, 2]]
        n = np.cross(v1 - v0, v2 - v0)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)

    def triangles(self) -> np.ndarray:
        """Per-face corner coordinates, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def __repr__(self):
        d = 0 if self.features is None else self.features.shape[1]
        return f"TriangleMesh(V={self.n_vertices}, F={self.n_faces}, D={d})"


def directed_edges(faces: np.ndarray) -> np.ndarray:
    """All (3F, 2) directed edges in face-traversal order."""
    return np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]
    )


@dataclass(frozen=True)
class ValidationReport:
    """Findings of :func:`validate`; never raises, carries everything."""

    closed: bool
    oriented: bool
    degenerate_faces: int
    n_boundary_edges: int
    signed_volume: float

    @property
    def outward(self) -> bool:
        """Handedness: True when consistently oriented with outward normals."""
        return self.signed_volume > 0


def validate(mesh: TriangleMesh) -> ValidationReport:
    """Check closedness, orientation consistency, and face degeneracy.

    ``closed`` holds iff every undirected edge is shared by exactly two
    faces. ``oriented`` holds iff no directed edge is traversed twice, so a
    closed oriented mesh traverses every edge once in each direction.
    Degenerate faces (repeated indices or zero area) are counted, not
    repaired.
    """
    f = mesh.faces
    if f.size == 0:
        return ValidationReport(False, True, 0, 0, 0.0)
    de = directed_edges(f)
    und = np.sort(de, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    closed = bool((counts == 2).all())
    n_boundary = int((counts == 1).sum())
    _, dcounts = np.unique(de, axis=0, return_counts=True)
    oriented = bool((dcounts == 1).all())

    repeated = (
        (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
    )
    v0, v1, v2 = (mesh.vertices[f[:, k]] for k in range(3))
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    edge_sq = np.maximum.reduce(
        [
            np.einsum("ij,ij->i", v1 - v0, v1 - v0),
            np.einsum("ij,ij->i", v2 - v1, v2 - v1),
            np.einsum("ij,ij->i", v0 - v2, v0 - v2),
        ]
    )
    # collinear-but-distinct faces: area vanishes relative to edge scale
    zero_area = area2 <= 1e-14 * edge_sq
    degenerate = int((repeated | zero_area).sum())

    signed_volume = float(np.einsum("ij,ij->", v0, np.cross(v1, v2)) / 6.0)
    return ValidationReport(
        closed, oriented, degenerate, n_boundary, signed_volume
    )


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Raises
    ------
    MeshError
        If some vertex has no incident area (isolated vertex or zero-area
        star); the first offending vertex id is reported.
    """
    f = mesh.faces
    v0, v1, v2 = (mesh.vertices[f[:, k]] for k in range(3))
    cross = np.cross(v1 - v0, v2 - v0)  # face normal scaled by 2*area
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        for c in range(3):
            acc[:, c] += np.bincount(
                f[:, k], weights=cross[:, c], minlength=mesh.n_vertices
            )
    norms = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norms <= 0)
    if bad.size:
        raise MeshError(
            f"vertex {int(bad[0])}: zero normal (isolated vertex or "
            f"zero-area star); {bad.size} vertices affected"
        )
    return acc / norms[:, None]


class LongitudinalSubject:
    """Ordered visit sequence of corresponded meshes for one subject.

    All visits of one surface kind must share a connectivity tag, so vertex
    k denotes the same anatomical location at every visit. An optional
    second surface (outer boundary) may accompany the primary one for
    thickness work.
    """

    def __init__(self, subject_id: str, visits, pial_visits=None):
        if not visits:
            raise MeshError("subject needs at least one visit")
        tags = {m.tag for m in visits}
        if len(tags) != 1:
            raise MeshError(
                f"subject {subject_id!r}: visits do not share connectivity"
            )
        if pial_visits is not None:
            if len(pial_visits) != len(visits):
                raise MeshError(
                    f"subject {subject_id!r}: visit count mismatch between "
                    "surfaces"
                )
            ptags = {m.tag for m in pial_visits}
            if len(ptags) != 1:
                raise MeshError(
                    f"subject {subject_id!r}: outer-surface visits do not "
                    "share connectivity"
                )
        self.subject_id = subject_id
        self.visits = list(visits)
        self.pial_visits = list(pial_visits) if pial_visits else None

    @property
    def n_followups(self) -> int:
        """Number of follow-up visits after the initial one."""
        return len(self.visits) - 1

    @property
    def tag(self) -> ConnectivityTag:
        return self.visits[0].tag

    def __repr__(self):
        return (
            f"LongitudinalSubject({self.subject_id!r}, "
            f"visits={len(self.visits)})"
        )
