"""Synthetic cortical phantoms with known ground truth.

Phantoms are radial graphs over subdivided icosahedra: a bumpy inner
surface, an outer surface offset along the vertex normals by a prescribed
thickness field, spherical sector labels standing in for an atlas, and
per-visit warps plus planted sector atrophy for longitudinal studies.
Radial-graph construction keeps the surfaces free of self-intersections by
design, so every generated mesh doubles as an oracle.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .flow import (
    AffineField,
    CompositeField,
    DeformationField,
    RadialBumpField,
    TrajectoryConfig,
    integrate,
)
from .mesh import LongitudinalSubject, TriangleMesh, vertex_normals
from .morphometry import RegionLabeling, VertexScalarField

_MAX_LEVEL = 8

# fixed tilt keeps lattice vertices off sector boundary planes, so sector
# occupancy tracks solid angle instead of boundary assignment artifacts
_SECTOR_TILT = np.array(
    [
        [0.99875026, -0.02497918, 0.04326961],
        [0.02986355, 0.99287646, -0.11602217],
        [-0.04006421, 0.11717284, 0.99230300],
    ]
)


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, faces


def _subdivide_project(verts: np.ndarray, faces: np.ndarray):
    verts = [v for v in verts]
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = np.empty((4 * len(faces), 3), dtype=np.int64)
    for k, (a, b, c) in enumerate(faces):
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        out[4 * k : 4 * k + 4] = [
            [a, ab, ca],
            [b, bc, ab],
            [c, ca, bc],
            [ab, bc, ca],
        ]
    return np.asarray(verts), out


def icosphere(level: int, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected to the sphere.

    Vertex and face counts follow the closed forms 10*4^L + 2 and 20*4^L.
    Levels above 8 are rejected as a size guard.
    """
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    if level > _MAX_LEVEL:
        raise ValueError(f"subdivision level {level} > {_MAX_LEVEL} rejected")
    if not radius > 0:
        raise ValueError("radius must be positive")
    v, f = icosahedron()
    for _ in range(level):
        v, f = _subdivide_project(v, f)
    return TriangleMesh(v * radius, f)


def sector_labels(
    mesh: TriangleMesh,
    n_sectors: int = 8,
    unknown_id: int = 0,
) -> RegionLabeling:
    """Spherical sector labels emulating atlas regions.

    The default eight sectors are the octants of a slightly tilted frame
    (equal solid angle each); other counts use equal-width longitude
    wedges. One sector carries the name ``unknown`` to exercise exclusion
    paths.
    """
    if n_sectors < 2:
        raise ValueError("need at least 2 sectors")
    if not 0 <= unknown_id < n_sectors:
        raise ValueError("unknown sector id out of range")
    dirs = mesh.vertices - mesh.vertices.mean(axis=0)
    dirs = dirs @ _SECTOR_TILT.T
    if n_sectors == 8:
        labels = (
            (dirs[:, 0] > 0).astype(np.int64) * 4
            + (dirs[:, 1] > 0).astype(np.int64) * 2
            + (dirs[:, 2] > 0).astype(np.int64)
        )
    else:
        phi = np.arctan2(dirs[:, 1], dirs[:, 0])  # equal solid angle wedges
        labels = np.floor((phi + np.pi) / (2 * np.pi) * n_sectors).astype(
            np.int64
        )
        labels = np.clip(labels, 0, n_sectors - 1)
    names = [
        "unknown" if i == unknown_id else f"sector_{i}"
        for i in range(n_sectors)
    ]
    return RegionLabeling(labels, names, mesh.tag)


@dataclass(frozen=True)
class PhantomSpec:
    """Full recipe for one synthetic subject; pure function of the seed."""

    level: int = 3
    radius: float = 10.0
    n_bumps: int = 6
    bump_amplitude: float = 1.0
    bump_width: float = 0.45  # radians of angular extent
    thickness_mean: float = 2.0
    thickness_wobble: float = 0.3
    n_visits: int = 3
    visit_times: tuple = ()  # years; default 0, 1, 2, ...
    warp_rotation_deg: float = 1.0
    warp_translation: float = 0.1
    warp_bump_amplitude: float = 0.1
    atrophy_rate: float = 0.0  # mm per year inside affected sectors
    affected_sectors: tuple = ()
    n_sectors: int = 8
    unknown_sector_id: int = 0
    subject_thickness_sd: float = 0.0
    subject_slope_sd: float = 0.0
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.level <= _MAX_LEVEL:
            raise ValueError(f"level must lie in [0, {_MAX_LEVEL}]")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.n_bumps < 0:
            raise ValueError("bump count must be >= 0")
        if not abs(self.bump_amplitude) < self.radius / 2:
            raise ValueError(
                "bump amplitude must stay below radius/2 to keep the "
                "surface a radial graph"
            )
        if self.n_visits < 1:
            raise ValueError("need at least one visit")
        if self.thickness_mean - self.thickness_wobble <= 0:
            raise ValueError("thickness field must stay strictly positive")
        if self.visit_times and len(self.visit_times) != self.n_visits:
            raise ValueError("visit_times length must equal n_visits")

    def times(self) -> np.ndarray:
        if self.visit_times:
            return np.asarray(self.visit_times, dtype=np.float64)
        return np.arange(self.n_visits, dtype=np.float64)


@dataclass(frozen=True)
class PhantomSurfaces:
    wm: TriangleMesh
    pial: TriangleMesh
    labels: RegionLabeling
    thickness: VertexScalarField


def _angular_gaussians(dirs, centers, amps, width):
    out = np.zeros(len(dirs))
    for c, a in zip(centers, amps):
        ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
        out += a * np.exp(-(ang**2) / (2.0 * width**2))
    return out


def _base_geometry(spec: PhantomSpec, rng: np.random.Generator):
    sphere = icosphere(spec.level, 1.0)
    dirs = sphere.vertices
    centers = rng.normal(size=(spec.n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    amps = rng.uniform(-1.0, 1.0, size=spec.n_bumps) * spec.bump_amplitude
    bump = _angular_gaussians(dirs, centers, amps, spec.bump_width)
    # summed bumps can overshoot a single amplitude; rescale into bounds
    peak = np.abs(bump).max() if spec.n_bumps else 0.0
    if peak > spec.bump_amplitude and peak > 0:
        bump *= spec.bump_amplitude / peak
    r = spec.radius + bump
    wm = TriangleMesh(dirs * r[:, None], sphere.faces)

    d1 = rng.normal(size=3)
    d1 /= np.linalg.norm(d1)
    d2 = rng.normal(size=3)
    d2 /= np.linalg.norm(d2)
    thickness = spec.thickness_mean + spec.thickness_wobble * (
        (dirs @ d1) * (dirs @ d2)
    )
    return wm, thickness


def make_phantom(spec: PhantomSpec) -> PhantomSurfaces:
    """Inner/outer surface pair with prescribed thickness and labels.

    The returned thickness field is the construction input, i.e. the
    ground truth that measurement code is tested against.
    """
    rng = np.random.default_rng(spec.seed)
    wm, thickness = _base_geometry(spec, rng)
    normals = vertex_normals(wm)
    pial = TriangleMesh(
        wm.vertices + thickness[:, None] * normals, wm.faces
    )
    labels = sector_labels(wm, spec.n_sectors, spec.unknown_sector_id)
    return PhantomSurfaces(
        wm, pial, labels, VertexScalarField(thickness, wm.tag, units="mm")
    )


def _visit_warp(spec: PhantomSpec, rng: np.random.Generator) -> DeformationField:
    angle = np.deg2rad(spec.warp_rotation_deg) * rng.standard_normal()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    shift = spec.warp_translation * rng.standard_normal(3)
    parts = [AffineField(angle * K, shift)]
    if spec.warp_bump_amplitude > 0:
        c = rng.normal(size=3)
        c = c / np.linalg.norm(c) * spec.radius
        parts.append(
            RadialBumpField(
                spec.warp_bump_amplitude * rng.standard_normal(),
                c,
                spec.radius * 0.5,
            )
        )
    return CompositeField(parts)


@dataclass(frozen=True)
class SynthLongitudinal:
    """Ground-truth longitudinal phantom for one subject."""

    subject: LongitudinalSubject
    warps: list
    thickness_truth: list
    metadata: list
    labels: RegionLabeling
    base: PhantomSurfaces


def synth_longitudinal(
    spec: PhantomSpec,
    subject_id: str = "sub-000",
    diagnosis: int = 0,
    age_baseline: float = 70.0,
    cfg: TrajectoryConfig | None = None,
) -> SynthLongitudinal:
    """Longitudinal visit sequence with known warps and planted atrophy.

    Visit j warps the baseline inner surface with a seeded smooth field and
    rebuilds the outer surface from the visit thickness field, which loses
    ``atrophy_rate * time`` inside the affected sectors for diagnosed
    subjects. Returned metadata rows are ready for the mixed-model design
    (subject, visit, age_baseline, time_years, diagnosis).
    """
    cfg = cfg or TrajectoryConfig()
    rng = np.random.default_rng(spec.seed)
    base = make_phantom(spec)
    times = spec.times()
    affected = np.isin(base.labels.labels, np.asarray(spec.affected_sectors))

    subj_offset = spec.subject_thickness_sd * rng.standard_normal()
    subj_slope = spec.subject_slope_sd * rng.standard_normal()

    wm_visits = []
    pial_visits = []
    warps = []
    truth = []
    metadata = []
    for j, w in enumerate(times):
        if j == 0:
            warp = None
            wm_j = base.wm
        else:
            warp = _visit_warp(spec, rng)
            wm_j = base.wm.with_vertices(
                integrate(base.wm.vertices, warp, cfg)
            )
        t_j = base.thickness.values + subj_offset + subj_slope * w
        if diagnosis and spec.atrophy_rate != 0:
            t_j = t_j - spec.atrophy_rate * w * affected
        if spec.noise_sd > 0:
            t_j = t_j + spec.noise_sd * rng.standard_normal(len(t_j))
        t_j = np.maximum(t_j, 0.05 * spec.thickness_mean)
        pial_j = wm_j.with_vertices(
            wm_j.vertices + t_j[:, None] * vertex_normals(wm_j)
        )
        wm_visits.append(wm_j)
        pial_visits.append(pial_j)
        warps.append(warp)
        truth.append(VertexScalarField(t_j, wm_j.tag, units="mm"))
        metadata.append(
            {
                "subject": subject_id,
                "visit": j,
                "age_baseline": float(age_baseline),
                "time_years": float(w),
                "diagnosis": int(diagnosis),
            }
        )
    subject = LongitudinalSubject(subject_id, wm_visits, pial_visits)
    return SynthLongitudinal(subject, warps, truth, metadata, base.labels, base)


@dataclass(frozen=True)
class CohortSpec:
    """Cohort layout around one phantom recipe."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_subjects: int = 8
    n_cases: int = 4
    age_range: tuple = (65.0, 85.0)

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("cohort needs at least 2 subjects")
        if not 0 <= self.n_cases <= self.n_subjects:
            raise ValueError("case count out of range")


def synth_cohort(cohort: CohortSpec, seed: int | None = None) -> list:
    """Deterministic list of synthetic subjects; cases come first.

    Per-subject seeds derive from the cohort seed, so distinct subjects get
    distinct geometry while the whole cohort is reproducible.
    """
    base_seed = cohort.phantom.seed if seed is None else seed
    ss = np.random.SeedSequence(base_seed)
    children = ss.spawn(cohort.n_subjects + 1)
    age_rng = np.random.default_rng(children[-1])
    ages = age_rng.uniform(*cohort.age_range, size=cohort.n_subjects)
    out = []
    for i in range(cohort.n_subjects):
        sub_seed = int(children[i].generate_state(1, dtype=np.uint64)[0])
        spec_i = dataclasses.replace(cohort.phantom, seed=sub_seed)
        out.append(
            synth_longitudinal(
                spec_i,
                subject_id=f"sub-{i:03d}",
                diagnosis=1 if i < cohort.n_cases else 0,
                age_baseline=float(round(ages[i], 2)),
            )
        )
    return out
