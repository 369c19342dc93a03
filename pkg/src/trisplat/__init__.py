"""Consistent depth rendering, consensus triangulation, and TSDF meshing
for 3D Gaussian scenes.

The package is layered bottom-up:

- ``linalg``     symmetric 4x4 eigensolver, shifted pseudo-inverse
- ``camera``     pinhole cameras, projection, neighbor selection
- ``gaussians``  Gaussian primitives, exact and ray-space intersection
- ``raster``     per-pixel consistent depth/normal rendering
- ``triangulate``  multi-view DLT assembly and consensus solve
- ``loss``       robust consensus loss with analytic gradients
- ``scenes``     synthetic surfaces and optimizable depth fields
- ``optimize``   gradient descent driver, ablations, metrics
- ``tsdf``       volumetric fusion and mesh extraction
- ``sceneio``    strict JSON scene files
- ``cli``        command-line front end
"""

__version__ = "0.1.0"

from .camera import (
    BehindCamera,
    CameraIntrinsics,
    CameraPose,
    CameraView,
    InsufficientViews,
    Observation,
    Ray,
    backproject_pixel,
    pixel_ray,
    project_point,
    project_points,
    select_neighbor_views,
)
from .gaussians import GaussianPrimitive, ray_gaussian_intersection_exact
from .loss import (
    EmptyBatch,
    RobustLossConfig,
    consensus_loss_batch,
    finite_diff_check,
    geman_mcclure,
    l2_loss_and_grad,
    sigma_schedule,
    tggc_loss_and_grad,
)
from .optimize import (
    ExperimentConfig,
    GeometryMetrics,
    OptimizationDiverged,
    ablate_k,
    ablate_loss,
    eval_metrics,
    optimize,
)
from .raster import DepthNormalMap, render_depth_normal
from .sceneio import SceneFile, SceneFormatError, load_scene, save_scene
from .scenes import (
    GroundTruthSurface,
    OptimizableSurface,
    SyntheticScene,
    analytic_depth_map,
    make_synthetic_scene,
    plane_surface,
    sphere_surface,
)
from .triangulate import (
    ConsensusPoint,
    DltSystem,
    SurfacePoint,
    assemble_dlt,
    batch_triangulate,
    solve_consensus,
    triangulate,
    triangulate_oracle,
)
from .tsdf import (
    TriangleMesh,
    TsdfVolume,
    extract_mesh,
    fuse_tsdf,
    make_volume_for_bbox,
    mesh_chamfer,
)

__all__ = [
    "__version__",
    "BehindCamera",
    "CameraIntrinsics",
    "CameraPose",
    "CameraView",
    "ConsensusPoint",
    "DepthNormalMap",
    "DltSystem",
    "EmptyBatch",
    "ExperimentConfig",
    "GaussianPrimitive",
    "GeometryMetrics",
    "GroundTruthSurface",
    "InsufficientViews",
    "Observation",
    "OptimizableSurface",
    "OptimizationDiverged",
    "Ray",
    "RobustLossConfig",
    "SceneFile",
    "SceneFormatError",
    "SurfacePoint",
    "SyntheticScene",
    "TriangleMesh",
    "TsdfVolume",
    "ablate_k",
    "ablate_loss",
    "analytic_depth_map",
    "assemble_dlt",
    "backproject_pixel",
    "batch_triangulate",
    "consensus_loss_batch",
    "eval_metrics",
    "extract_mesh",
    "finite_diff_check",
    "fuse_tsdf",
    "geman_mcclure",
    "l2_loss_and_grad",
    "load_scene",
    "make_synthetic_scene",
    "make_volume_for_bbox",
    "mesh_chamfer",
    "optimize",
    "pixel_ray",
    "plane_surface",
    "project_point",
    "project_points",
    "ray_gaussian_intersection_exact",
    "render_depth_normal",
    "save_scene",
    "select_neighbor_views",
    "sigma_schedule",
    "solve_consensus",
    "sphere_surface",
    "tggc_loss_and_grad",
    "triangulate",
    "triangulate_oracle",
]
