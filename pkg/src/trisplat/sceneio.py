"""Strict JSON scene files: cameras, Gaussians, optional ground truth.

Schema (all keys shown; no other keys are tolerated anywhere):

    {
      "cameras": [
        {"id": 0, "width": 128, "height": 128,
         "fx": 153.6, "fy": 153.6, "cx": 64.0, "cy": 64.0,
         "pose": [r00, r01, r02, tx, r10, r11, r12, ty, r20, r21, r22, tz]}
      ],
      "gaussians": [
        {"center": [x, y, z], "rotation": [w, x, y, z],
         "scales": [sx, sy, sz], "opacity": 0.95}
      ],
      "ground_truth": {"sphere": {"center": [0, 0, 0], "radius": 1.0}}
    }

``pose`` is the world-to-camera [R | t], row-major.  ``ground_truth`` is
optional and holds exactly one of: {"sphere": {center, radius}},
{"plane": {point, normal, extent?}}, or {"points_path": "relative/file"}
naming a text file of x y z rows (comma or whitespace separated).  Quaternions
are renormalized on load; every validation error names the offending field
path, e.g. "gaussians[0].scales".
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraPose, CameraView
from .gaussians import GaussianPrimitive
from .scenes import GroundTruthSurface, plane_surface, sphere_surface


class SceneFormatError(ValueError):
    """Scene file violates the schema; message carries the field path."""


@dataclass(frozen=True, eq=False)
class SceneFile:
    cameras: list[CameraView]
    gaussians: list[GaussianPrimitive]
    ground_truth: GroundTruthSurface | None = None
    ground_truth_points: np.ndarray | None = None
    points_path: str | None = None  # as written in the file, for re-save

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None or self.ground_truth_points is not None


def _require_keys(obj, allowed: dict, path: str) -> None:
    if not isinstance(obj, dict):
        raise SceneFormatError(f"{path}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise SceneFormatError(f"{path}.{key}: unknown field")
    for key, required in allowed.items():
        if required and key not in obj:
            raise SceneFormatError(f"{path}.{key}: missing required field")


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneFormatError(f"{path}: expected a number, got {type(value).__name__}")
    out = float(value)
    if not np.isfinite(out):
        raise SceneFormatError(f"{path}: must be finite, got {value}")
    return out


def _integer(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneFormatError(f"{path}: expected an integer, got {value!r}")
    return value


def _vector(value, n: int, path: str) -> np.ndarray:
    if not isinstance(value, list) or len(value) != n:
        raise SceneFormatError(f"{path}: expected a list of {n} numbers")
    return np.array([_number(x, f"{path}[{i}]") for i, x in enumerate(value)])


_CAMERA_KEYS = {
    "id": True, "width": True, "height": True,
    "fx": True, "fy": True, "cx": True, "cy": True, "pose": True,
}
_GAUSSIAN_KEYS = {"center": True, "rotation": True, "scales": True, "opacity": True}


def _parse_camera(obj, path: str) -> CameraView:
    _require_keys(obj, _CAMERA_KEYS, path)
    pose_flat = _vector(obj["pose"], 12, f"{path}.pose")
    Rt = pose_flat.reshape(3, 4)
    try:
        intrinsics = CameraIntrinsics(
            fx=_number(obj["fx"], f"{path}.fx"),
            fy=_number(obj["fy"], f"{path}.fy"),
            cx=_number(obj["cx"], f"{path}.cx"),
            cy=_number(obj["cy"], f"{path}.cy"),
            width=_integer(obj["width"], f"{path}.width"),
            height=_integer(obj["height"], f"{path}.height"),
        )
        pose = CameraPose(R=Rt[:, :3], t=Rt[:, 3])
    except SceneFormatError:
        raise
    except ValueError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    return CameraView(view_id=_integer(obj["id"], f"{path}.id"), intrinsics=intrinsics, pose=pose)


def _parse_gaussian(obj, path: str) -> GaussianPrimitive:
    _require_keys(obj, _GAUSSIAN_KEYS, path)
    center = _vector(obj["center"], 3, f"{path}.center")
    rotation = _vector(obj["rotation"], 4, f"{path}.rotation")
    scales = _vector(obj["scales"], 3, f"{path}.scales")
    opacity = _number(obj["opacity"], f"{path}.opacity")
    if np.any(scales <= 0.0):
        raise SceneFormatError(
            f"{path}.scales: scales must be positive (covariance must be positive definite)"
        )
    if np.linalg.norm(rotation) == 0.0:
        raise SceneFormatError(f"{path}.rotation: quaternion must be nonzero")
    if not 0.0 < opacity <= 1.0:
        raise SceneFormatError(f"{path}.opacity: must lie in (0, 1], got {opacity}")
    try:
        return GaussianPrimitive(center=center, rotation=rotation, scales=scales, opacity=opacity)
    except ValueError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


def _load_point_file(path: str) -> np.ndarray:
    try:
        delimiter = "," if path.endswith(".csv") else None
        pts = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except OSError as exc:
        raise SceneFormatError(f"ground_truth.points_path: cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise SceneFormatError(f"ground_truth.points_path: cannot parse {path}: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise SceneFormatError(
            f"ground_truth.points_path: {path} must hold rows of x y z, got shape {pts.shape}"
        )
    return pts


def _parse_ground_truth(obj, base_dir: str):
    path = "ground_truth"
    _require_keys(obj, {"sphere": False, "plane": False, "points_path": False}, path)
    if len(obj) != 1:
        raise SceneFormatError(
            f"{path}: exactly one of sphere | plane | points_path required, got {sorted(obj)}"
        )
    if "sphere" in obj:
        spec = obj["sphere"]
        _require_keys(spec, {"center": True, "radius": True}, f"{path}.sphere")
        radius = _number(spec["radius"], f"{path}.sphere.radius")
        if radius <= 0.0:
            raise SceneFormatError(f"{path}.sphere.radius: must be positive, got {radius}")
        center = _vector(spec["center"], 3, f"{path}.sphere.center")
        return sphere_surface(center, radius), None, None
    if "plane" in obj:
        spec = obj["plane"]
        _require_keys(spec, {"point": True, "normal": True, "extent": False}, f"{path}.plane")
        point = _vector(spec["point"], 3, f"{path}.plane.point")
        normal = _vector(spec["normal"], 3, f"{path}.plane.normal")
        if np.linalg.norm(normal) == 0.0:
            raise SceneFormatError(f"{path}.plane.normal: must be nonzero")
        extent = _number(spec.get("extent", 1.0), f"{path}.plane.extent")
        if extent <= 0.0:
            raise SceneFormatError(f"{path}.plane.extent: must be positive, got {extent}")
        return plane_surface(point, normal, extent), None, None
    rel = obj["points_path"]
    if not isinstance(rel, str) or not rel:
        raise SceneFormatError(f"{path}.points_path: expected a non-empty string")
    return None, _load_point_file(os.path.join(base_dir, rel)), rel


def load_scene(path) -> SceneFile:
    """Parse and validate a scene file; see the module docstring for the schema."""
    path = str(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise SceneFormatError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path} is not valid JSON: {exc}") from exc

    _require_keys(raw, {"cameras": True, "gaussians": False, "ground_truth": False}, "scene")
    cam_list = raw["cameras"]
    if not isinstance(cam_list, list) or not cam_list:
        raise SceneFormatError("scene.cameras: expected a non-empty list")
    cameras = [_parse_camera(c, f"cameras[{i}]") for i, c in enumerate(cam_list)]
    ids = [c.view_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise SceneFormatError("scene.cameras: duplicate camera ids")
    sizes = {(c.intrinsics.width, c.intrinsics.height) for c in cameras}
    if len(sizes) != 1:
        raise SceneFormatError("scene.cameras: all cameras must share width and height")

    gauss_list = raw.get("gaussians", [])
    if not isinstance(gauss_list, list):
        raise SceneFormatError("scene.gaussians: expected a list")
    gaussians = [_parse_gaussian(g, f"gaussians[{i}]") for i, g in enumerate(gauss_list)]

    ground_truth = None
    gt_points = None
    points_path = None
    if "ground_truth" in raw:
        ground_truth, gt_points, points_path = _parse_ground_truth(
            raw["ground_truth"], os.path.dirname(os.path.abspath(path))
        )
    return SceneFile(
        cameras=cameras,
        gaussians=gaussians,
        ground_truth=ground_truth,
        ground_truth_points=gt_points,
        points_path=points_path,
    )


def scene_to_dict(scene: SceneFile) -> dict:
    out: dict = {
        "cameras": [
            {
                "id": c.view_id,
                "width": c.intrinsics.width,
                "height": c.intrinsics.height,
                "fx": c.intrinsics.fx,
                "fy": c.intrinsics.fy,
                "cx": c.intrinsics.cx,
                "cy": c.intrinsics.cy,
                "pose": [float(x) for x in np.hstack([c.pose.R, c.pose.t[:, None]]).ravel()],
            }
            for c in scene.cameras
        ],
        "gaussians": [
            {
                "center": [float(x) for x in g.center],
                "rotation": [float(x) for x in g.rotation],
                "scales": [float(x) for x in g.scales],
                "opacity": float(g.opacity),
            }
            for g in scene.gaussians
        ],
    }
    if scene.points_path is not None:
        out["ground_truth"] = {"points_path": scene.points_path}
    elif scene.ground_truth is not None:
        gt = scene.ground_truth
        if gt.kind == "sphere":
            out["ground_truth"] = {
                "sphere": {
                    "center": [float(x) for x in gt.centers[0]],
                    "radius": float(gt.radii[0]),
                }
            }
        elif gt.kind == "plane":
            out["ground_truth"] = {
                "plane": {
                    "point": [float(x) for x in gt.point],
                    "normal": [float(x) for x in gt.normal],
                    "extent": float(gt.extent),
                }
            }
        else:
            raise ValueError(f"cannot serialize ground truth kind {gt.kind!r}")
    return out


def save_scene(path, scene: SceneFile) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
        fh.write("\n")
