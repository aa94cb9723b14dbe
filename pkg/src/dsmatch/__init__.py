"""dsmatch: co-registration and quality assessment of DSM point clouds.

Pipeline: z-buffer the reference onto a fixed-GSD grid keeping original
point coordinates, triangulate it, co-register the matcher cloud with
iterative least-squares surface matching (with K*delta blunder
rejection), then evaluate the fixed transform with a large K so the
reported statistics include the blunders.
"""

from .errors import (
    DegenerateGridError,
    DsmatchError,
    InvalidPolygonError,
    NoCorrespondencesError,
    RankDeficientError,
)
from .geometry import (
    IDENTITY,
    SimilarityTransform,
    apply_transform,
    compose,
    invert,
    rotation_matrix,
)
from .metrics import (
    EvaluationReport,
    Histogram,
    apply_mask,
    error_grid,
    histogram,
    summarize,
)
from .raster import GridSpec, RasterGrid, extract_cloud, mesh_from_grid, rasterize
from .registration import (
    CorrespondenceSet,
    RegistrationConfig,
    RegistrationResult,
    Status,
    evaluate_fixed,
    find_correspondences,
    register,
    reject_blunders,
)
from .surface import (
    FootPoint,
    SpatialIndex,
    SurfaceMesh,
    build_index,
    closest_point,
    signed_distance,
)
from .synth import PerturbationSpec, SceneSpec, brute_force_closest, make_scene, perturb

__version__ = "0.1.0"

__all__ = [
    "DegenerateGridError",
    "DsmatchError",
    "InvalidPolygonError",
    "NoCorrespondencesError",
    "RankDeficientError",
    "IDENTITY",
    "SimilarityTransform",
    "apply_transform",
    "compose",
    "invert",
    "rotation_matrix",
    "EvaluationReport",
    "Histogram",
    "apply_mask",
    "error_grid",
    "histogram",
    "summarize",
    "GridSpec",
    "RasterGrid",
    "extract_cloud",
    "mesh_from_grid",
    "rasterize",
    "CorrespondenceSet",
    "RegistrationConfig",
    "RegistrationResult",
    "Status",
    "evaluate_fixed",
    "find_correspondences",
    "register",
    "reject_blunders",
    "FootPoint",
    "SpatialIndex",
    "SurfaceMesh",
    "build_index",
    "closest_point",
    "signed_distance",
    "PerturbationSpec",
    "SceneSpec",
    "brute_force_closest",
    "make_scene",
    "perturb",
]
