"""Longitudinal cortical surface analysis toolkit.

Mesh-space within-subject template creation with Euler-integrated
deformation fields, surface accuracy and longitudinal consistency metrics,
vertex-wise mixed-effects statistics, and synthetic phantoms with known
ground truth to validate all of it.
"""

from .flow import (
    AffineField,
    CompositeField,
    ConstantField,
    DeformationField,
    GeneralizedVertexSet,
    MeanField,
    PerVertexField,
    RadialBumpField,
    TrajectoryConfig,
    field_from_json,
    integrate,
    mean_field,
    median_template,
    two_stage_pipeline,
    verify_trajectory_averaging,
    within_subject_template,
)
from .intersect import SelfIntersectionReport, self_intersecting_faces
from .lme import (
    LmeDataset,
    LmeDesign,
    LmeFit,
    lme_fit,
    lme_vertexwise,
)
from .mesh import (
    ConnectivityTag,
    LongitudinalSubject,
    MeshError,
    TriangleMesh,
    ValidationReport,
    validate,
    vertex_normals,
)
from .meshio import load_features, load_mesh, save_mesh
from .metrics import (
    DistanceReport,
    PointSample,
    assd,
    distance_report,
    hausdorff,
    sample_surface,
    surface_distances,
)
from .morphometry import (
    RegionLabeling,
    VertexScalarField,
    cortical_thickness,
    longitudinal_variance,
    mean_curvature,
    parc_f1,
)
from .normative import AgeBracketNorms, auc, zscore, zscore_norms
from .phantom import (
    CohortSpec,
    PhantomSpec,
    icosphere,
    make_phantom,
    sector_labels,
    synth_cohort,
    synth_longitudinal,
)
from .spatial import SurfaceIndex, closest_point_on_triangles

__version__ = "0.1.0"

__all__ = [
    "AffineField",
    "AgeBracketNorms",
    "CohortSpec",
    "CompositeField",
    "ConnectivityTag",
    "ConstantField",
    "DeformationField",
    "DistanceReport",
    "GeneralizedVertexSet",
    "LmeDataset",
    "LmeDesign",
    "LmeFit",
    "LongitudinalSubject",
    "MeanField",
    "MeshError",
    "PerVertexField",
    "PhantomSpec",
    "PointSample",
    "RadialBumpField",
    "RegionLabeling",
    "SelfIntersectionReport",
    "SurfaceIndex",
    "TrajectoryConfig",
    "TriangleMesh",
    "ValidationReport",
    "VertexScalarField",
    "assd",
    "auc",
    "closest_point_on_triangles",
    "cortical_thickness",
    "distance_report",
    "field_from_json",
    "hausdorff",
    "icosphere",
    "integrate",
    "lme_fit",
    "lme_vertexwise",
    "load_features",
    "load_mesh",
    "longitudinal_variance",
    "make_phantom",
    "mean_curvature",
    "mean_field",
    "median_template",
    "parc_f1",
    "sample_surface",
    "save_mesh",
    "sector_labels",
    "self_intersecting_faces",
    "surface_distances",
    "synth_cohort",
    "synth_longitudinal",
    "two_stage_pipeline",
    "validate",
    "verify_trajectory_averaging",
    "vertex_normals",
    "within_subject_template",
    "zscore",
    "zscore_norms",
]
